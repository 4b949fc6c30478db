/* tslint:disable */
/* eslint-disable */

/**
 * Run-length filter over a scalar stream.
 *
 * Layout: per observation `change_score, expected run length`.
 */
export function bocpd_scores(xs: Float64Array, hazard: number): Float64Array;

/**
 * One closed-loop episode, partner types indexed Helper, Competitor,
 * Blocker, Passive. With `oracle` the ego is told the switch step,
 * otherwise it never adapts.
 *
 * Layout: `[t_switch, collisions_post, crt_post]`, then per step
 * `ego x, ego y, partner x, partner y, object x, object y, distance`.
 */
export function episode(from: number, to: number, seed: number, oracle: boolean): Float64Array;

/**
 * Drives an untrained tracker (initialized from `seed`) with one feature
 * pattern up to `switch_at` and another after it.
 *
 * Layout: per step `update_norm, mean step size, switch probability`.
 */
export function tracker_response(seed: number, steps: number, switch_at: number, contrast: number): Float64Array;

/**
 * Workspace width and depth, for scaling the canvas.
 */
export function workspace_size(): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly bocpd_scores: (a: number, b: number, c: number) => [number, number, number, number];
    readonly episode: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly tracker_response: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly workspace_size: () => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
