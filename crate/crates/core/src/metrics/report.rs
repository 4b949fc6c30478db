//! Tables built from the raw evaluation CSVs, and a markdown report that
//! only reads the tables back. Numbers are printed with fixed precision so
//! reruns produce identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{mean, sample_std};
use crate::metrics::{cv, reliability};

/// A rectangular string table. Empty cells mean "not available".
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("missing column {name}")))
    }

    /// Cell `name` of `row`.
    pub fn get<'a>(&self, row: &'a [String], name: &str) -> Result<&'a str> {
        Ok(row[self.col(name)?].as_str())
    }

    pub fn num(&self, row: &[String], name: &str) -> Result<Option<f64>> {
        let s = self.get(row, name)?;
        if s.is_empty() {
            return Ok(None);
        }
        s.parse()
            .map(Some)
            .map_err(|_| Error::InvalidInput(format!("column {name}: not a number: {s:?}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|x| x.iter().map(String::from).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { header, rows })
    }

    pub fn to_markdown(&self) -> String {
        let cell = |s: &str| if s.is_empty() { "—".to_string() } else { s.to_string() };
        let mut out = format!("| {} |\n", self.header.join(" | "));
        out += &format!("|{}\n", "---|".repeat(self.header.len()));
        for r in &self.rows {
            out += &format!("| {} |\n", r.iter().map(|c| cell(c)).collect::<Vec<_>>().join(" | "));
        }
        out
    }
}

fn f(x: f64, digits: usize) -> String {
    if x.is_finite() {
        format!("{x:.digits$}")
    } else {
        String::new()
    }
}

fn fo(x: Option<f64>, digits: usize) -> String {
    x.map(|v| f(v, digits)).unwrap_or_default()
}

/// Parsed row of `eval/episodes.csv`.
#[derive(Debug, Clone)]
struct Ep {
    method: String,
    adaptation: String,
    seed: u64,
    transition: String,
    hits: Vec<bool>,
    latency: Option<f64>,
    false_alarms: usize,
    collisions: f64,
    crt: f64,
}

fn tolerances_of(t: &Table) -> Vec<usize> {
    t.header
        .iter()
        .filter_map(|h| h.strip_prefix("hit_").and_then(|k| k.parse().ok()))
        .collect()
}

fn parse_episodes(t: &Table) -> Result<Vec<Ep>> {
    let ks = tolerances_of(t);
    t.rows
        .iter()
        .map(|r| {
            let bad = |c: &str| Error::InvalidInput(format!("episodes.csv: bad {c}"));
            Ok(Ep {
                method: t.get(r, "method")?.to_string(),
                adaptation: t.get(r, "adaptation")?.to_string(),
                seed: t.get(r, "seed")?.parse().map_err(|_| bad("seed"))?,
                transition: t.get(r, "transition")?.to_string(),
                hits: ks
                    .iter()
                    .map(|k| Ok(t.get(r, &format!("hit_{k}"))? == "1"))
                    .collect::<Result<_>>()?,
                latency: t.num(r, "latency")?,
                false_alarms: t.get(r, "false_alarms")?.parse().map_err(|_| bad("false_alarms"))?,
                collisions: t.num(r, "collisions_post")?.ok_or_else(|| bad("collisions_post"))?,
                crt: t.num(r, "crt_post")?.ok_or_else(|| bad("crt_post"))?,
            })
        })
        .collect()
}

/// Keeps the order of first appearance.
fn ordered_keys<K: Clone + PartialEq>(it: impl Iterator<Item = K>) -> Vec<K> {
    let mut out: Vec<K> = Vec::new();
    for k in it {
        if !out.contains(&k) {
            out.push(k);
        }
    }
    out
}

struct SeedStats {
    det: Vec<f64>,
    latency: Option<(f64, f64)>,
    fa_pct: f64,
    collisions: f64,
    crt: f64,
    n: usize,
}

fn seed_stats(eps: &[&Ep], nk: usize) -> SeedStats {
    let n = eps.len();
    let det = (0..nk)
        .map(|i| 100.0 * eps.iter().filter(|e| e.hits[i]).count() as f64 / n as f64)
        .collect();
    let lats: Vec<f64> = eps.iter().filter_map(|e| e.latency).collect();
    let latency = (!lats.is_empty()).then(|| (mean(&lats), if lats.len() > 1 { sample_std(&lats) } else { 0.0 }));
    SeedStats {
        det,
        latency,
        fa_pct: 100.0 * eps.iter().filter(|e| e.false_alarms > 0).count() as f64 / n as f64,
        collisions: eps.iter().map(|e| e.collisions).sum::<f64>() / n as f64,
        crt: eps.iter().map(|e| e.crt).sum::<f64>() / n as f64,
        n,
    }
}

pub struct Report {
    pub per_seed: Table,
    pub summary: Table,
    pub heatmap_detection: Table,
    pub heatmap_collisions: Table,
    pub adaptation: Table,
    pub dynamics: Option<Table>,
    pub separability: Option<Table>,
}

/// Build every table from the evaluation directory. `main_adaptation` picks
/// the controller whose rows feed the summary and heatmaps.
pub fn build(eval_dir: &Path, main_adaptation: &str) -> Result<Report> {
    let episodes = Table::read(&eval_dir.join("episodes.csv"))?;
    let ks = tolerances_of(&episodes);
    if ks.is_empty() {
        return Err(Error::InvalidInput("episodes.csv has no hit columns".into()));
    }
    let eps = parse_episodes(&episodes)?;
    let conds = ordered_keys(eps.iter().map(|e| (e.method.clone(), e.adaptation.clone())));
    let seeds = ordered_keys(eps.iter().map(|e| e.seed));

    let mut hdr: Vec<String> = ["method", "adaptation", "seed", "episodes"].iter().map(|s| s.to_string()).collect();
    hdr.extend(ks.iter().map(|k| format!("det_{k}")));
    hdr.extend(
        ["latency_mean", "latency_std", "false_alarm_pct", "collisions_post", "crt_post"]
            .iter()
            .map(|s| s.to_string()),
    );
    let mut per_seed = Table {
        header: hdr,
        rows: Vec::new(),
    };
    let mut stats: BTreeMap<(String, String), Vec<SeedStats>> = BTreeMap::new();
    for (m, a) in &conds {
        for &s in &seeds {
            let sel: Vec<&Ep> = eps.iter().filter(|e| &e.method == m && &e.adaptation == a && e.seed == s).collect();
            if sel.is_empty() {
                continue;
            }
            let st = seed_stats(&sel, ks.len());
            let mut row = vec![m.clone(), a.clone(), s.to_string(), st.n.to_string()];
            row.extend(st.det.iter().map(|d| f(*d, 2)));
            row.extend([
                fo(st.latency.map(|l| l.0), 3),
                fo(st.latency.map(|l| l.1), 3),
                f(st.fa_pct, 2),
                f(st.collisions, 4),
                f(st.crt, 3),
            ]);
            per_seed.push(row);
            stats.entry((m.clone(), a.clone())).or_default().push(st);
        }
    }

    let mut hdr: Vec<String> = ["method", "seeds"].iter().map(|s| s.to_string()).collect();
    for k in &ks {
        hdr.extend([format!("det_{k}_mean"), format!("det_{k}_std"), format!("R_{k}"), format!("CV_{k}")]);
    }
    hdr.extend(
        ["latency_mean", "collisions_post", "crt_post", "collision_reduction_pct"]
            .iter()
            .map(|s| s.to_string()),
    );
    let mut summary = Table {
        header: hdr,
        rows: Vec::new(),
    };
    let nodetect = stats
        .get(&("NoDetect".to_string(), main_adaptation.to_string()))
        .map(|v| mean(&v.iter().map(|s| s.collisions).collect::<Vec<_>>()));
    for (m, a) in conds.iter().filter(|(_, a)| a == main_adaptation) {
        let v = &stats[&(m.clone(), a.clone())];
        let mut row = vec![m.clone(), v.len().to_string()];
        for i in 0..ks.len() {
            let d: Vec<f64> = v.iter().map(|s| s.det[i]).collect();
            let sd = if d.len() > 1 { sample_std(&d) } else { 0.0 };
            let r = reliability(&d).ok().filter(|r| !r.degenerate).map(|r| r.r);
            let c = cv(&d).ok();
            row.extend([f(mean(&d), 2), f(sd, 2), fo(r, 4), fo(c, 4)]);
        }
        let lats: Vec<f64> = v.iter().filter_map(|s| s.latency.map(|l| l.0)).collect();
        let coll = mean(&v.iter().map(|s| s.collisions).collect::<Vec<_>>());
        let red = nodetect.filter(|&n| n > 0.0).map(|n| 100.0 * (1.0 - coll / n));
        row.extend([
            if lats.is_empty() { String::new() } else { f(mean(&lats), 3) },
            f(coll, 4),
            f(mean(&v.iter().map(|s| s.crt).collect::<Vec<_>>()), 3),
            fo(red, 2),
        ]);
        summary.push(row);
    }

    let transitions = ordered_keys(eps.iter().map(|e| e.transition.clone()));
    let heat = |value: &dyn Fn(&[&Ep]) -> f64, digits: usize| {
        let mut h = vec!["method".to_string()];
        h.extend(transitions.iter().cloned());
        let mut t = Table {
            header: h,
            rows: Vec::new(),
        };
        for (m, _) in conds.iter().filter(|(_, a)| a == main_adaptation) {
            let mut row = vec![m.clone()];
            for tr in &transitions {
                let sel: Vec<&Ep> = eps
                    .iter()
                    .filter(|e| &e.method == m && e.adaptation == main_adaptation && &e.transition == tr)
                    .collect();
                row.push(if sel.is_empty() { String::new() } else { f(value(&sel), digits) });
            }
            t.push(row);
        }
        t
    };
    let heatmap_detection = heat(&|s| 100.0 * s.iter().filter(|e| e.hits[0]).count() as f64 / s.len() as f64, 1);
    let heatmap_collisions = heat(&|s| s.iter().map(|e| e.collisions).sum::<f64>() / s.len() as f64, 3);

    let mut adaptation = Table::new(&["method", "adaptation", "seeds", "crt_post", "collisions_post"]);
    let methods_with_both: Vec<String> = ordered_keys(conds.iter().map(|(m, _)| m.clone()))
        .into_iter()
        .filter(|m| conds.iter().filter(|(mm, _)| mm == m).count() > 1)
        .collect();
    for m in &methods_with_both {
        for (mm, a) in conds.iter().filter(|(mm, _)| mm == m) {
            let v = &stats[&(mm.clone(), a.clone())];
            adaptation.push(vec![
                m.clone(),
                a.clone(),
                v.len().to_string(),
                f(mean(&v.iter().map(|s| s.crt).collect::<Vec<_>>()), 3),
                f(mean(&v.iter().map(|s| s.collisions).collect::<Vec<_>>()), 4),
            ]);
        }
    }

    let dyn_path = eval_dir.join("dynamics.csv");
    let dynamics = if dyn_path.exists() { Some(dynamics_summary(&Table::read(&dyn_path)?)?) } else { None };
    let sep_path = eval_dir.join("separability.csv");
    let separability = if sep_path.exists() { Some(Table::read(&sep_path)?) } else { None };

    Ok(Report {
        per_seed,
        summary,
        heatmap_detection,
        heatmap_collisions,
        adaptation,
        dynamics,
        separability,
    })
}

/// Spike threshold used in the dynamics summary.
pub const SPIKE_MIN: f64 = 5.0;

fn dynamics_summary(t: &Table) -> Result<Table> {
    let mut out = Table::new(&[
        "seed",
        "episodes",
        "spike_ge5_pct",
        "spike_ratio_median",
        "pointwise_ratio_median",
        "decay_steps_mean",
        "decay_never",
        "delta_cv_mean",
        "delta_cv_max",
    ]);
    let seeds = ordered_keys(t.rows.iter().map(|r| r[t.col("seed").unwrap_or(0)].clone()));
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    };
    for s in seeds {
        let rows: Vec<&Vec<String>> = t.rows.iter().filter(|r| r[t.col("seed").unwrap_or(0)] == s).collect();
        let col = |name: &str| -> Result<Vec<Option<f64>>> { rows.iter().map(|r| t.num(r, name)).collect() };
        let spike: Vec<f64> = col("spike_ratio")?.into_iter().flatten().collect();
        let point: Vec<f64> = col("pointwise_ratio")?.into_iter().flatten().collect();
        let decay = col("decay_steps")?;
        let decays: Vec<f64> = decay.iter().flatten().copied().collect();
        let dcv: Vec<f64> = col("delta_cv")?.into_iter().flatten().collect();
        let n = rows.len();
        out.push(vec![
            s,
            n.to_string(),
            f(100.0 * spike.iter().filter(|&&x| x >= SPIKE_MIN).count() as f64 / n as f64, 2),
            f(median(spike), 3),
            f(median(point), 3),
            if decays.is_empty() { String::new() } else { f(mean(&decays), 3) },
            decay.iter().filter(|d| d.is_none()).count().to_string(),
            f(mean(&dcv), 5),
            f(dcv.iter().copied().fold(f64::NEG_INFINITY, f64::max), 5),
        ]);
    }
    Ok(out)
}

pub const TABLES: [&str; 7] = [
    "per_seed.csv",
    "summary.csv",
    "heatmap_detection.csv",
    "heatmap_collisions.csv",
    "adaptation.csv",
    "dynamics_summary.csv",
    "separability.csv",
];

pub fn write(report: &Report, dir: &Path) -> Result<()> {
    report.per_seed.write(&dir.join("per_seed.csv"))?;
    report.summary.write(&dir.join("summary.csv"))?;
    report.heatmap_detection.write(&dir.join("heatmap_detection.csv"))?;
    report.heatmap_collisions.write(&dir.join("heatmap_collisions.csv"))?;
    report.adaptation.write(&dir.join("adaptation.csv"))?;
    if let Some(d) = &report.dynamics {
        d.write(&dir.join("dynamics_summary.csv"))?;
    }
    if let Some(s) = &report.separability {
        s.write(&dir.join("separability.csv"))?;
    }
    Ok(())
}

/// Markdown assembled from the CSVs in `dir` only.
pub fn markdown(dir: &Path) -> Result<String> {
    let read = |name: &str| -> Result<Option<Table>> {
        let p = dir.join(name);
        if p.exists() {
            Table::read(&p).map(Some)
        } else {
            Ok(None)
        }
    };
    let mut md = String::from("# Switch detection report\n\n");
    if let Some(s) = read("summary.csv")? {
        md += "## Headline\n\n";
        let red = s.col("collision_reduction_pct")?;
        for r in &s.rows {
            if r[0] == "uatom" || r[0] == "gru" || r[0] == "bocpd" {
                let v = if r[red].is_empty() { "—" } else { r[red].as_str() };
                md += &format!("- {}: post-switch collisions reduced by {v}% relative to NoDetect\n", r[0]);
            }
        }
        md += "\n## Summary over seeds\n\n";
        md += &s.to_markdown();
        md += "\n";
    }
    let sections = [
        ("per_seed.csv", "Per seed"),
        ("heatmap_detection.csv", "Detection at the tightest tolerance by transition (%)"),
        ("heatmap_collisions.csv", "Post-switch collisions by transition"),
        ("adaptation.csv", "Adaptation controllers"),
        ("dynamics_summary.csv", "Belief-update dynamics around the switch"),
        ("separability.csv", "Embedding separability"),
    ];
    for (file, title) in sections {
        if let Some(t) = read(file)? {
            md += &format!("## {title}\n\n{}\n", t.to_markdown());
        }
    }
    Ok(md)
}

/// Build, write the CSVs and render `report.md`.
pub fn generate(eval_dir: &Path, out_dir: &Path, main_adaptation: &str) -> Result<String> {
    let r = build(eval_dir, main_adaptation)?;
    write(&r, out_dir)?;
    let md = markdown(out_dir)?;
    std::fs::write(out_dir.join("report.md"), &md)?;
    Ok(md)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episodes_csv(dir: &Path) {
        let mut t = Table::new(&[
            "method", "adaptation", "seed", "episode", "episode_seed", "transition", "t_switch", "first_detection",
            "hit_3", "hit_15", "latency", "false_alarms", "collisions_post", "crt_post", "collisions_total",
        ]);
        let row = |m: &str, s: u64, tr: &str, hit3: bool, lat: Option<usize>, coll: usize, crt: usize| {
            vec![
                m.into(), "Blend".into(), s.to_string(), "0".into(), "1".into(), tr.into(), "50".into(),
                lat.map(|l| (49 + l).to_string()).unwrap_or_default(),
                if hit3 { "1" } else { "0" }.into(), if lat.is_some() { "1" } else { "0" }.into(),
                lat.map(|l| l.to_string()).unwrap_or_default(), "0".into(), coll.to_string(), crt.to_string(), coll.to_string(),
            ]
        };
        for s in 0..2 {
            t.push(row("uatom", s, "Pass->Block", true, Some(1), 0, 2));
            t.push(row("uatom", s, "Help->Comp", s == 0, Some(5), 1, 4));
            t.push(row("NoDetect", s, "Pass->Block", false, None, 2, 9));
            t.push(row("NoDetect", s, "Help->Comp", false, None, 2, 7));
        }
        t.write(&dir.join("episodes.csv")).unwrap();
    }

    #[test]
    fn hand_computed_summary() {
        let dir = tempfile::tempdir().unwrap();
        episodes_csv(dir.path());
        let r = build(dir.path(), "Blend").unwrap();
        let s = &r.summary;
        let u = s.rows.iter().find(|r| r[0] == "uatom").unwrap();
        // Seed 0 detects 2/2 at +-3, seed 1 detects 1/2.
        assert_eq!(s.get(u, "det_3_mean").unwrap(), "75.00");
        assert_eq!(s.get(u, "R_3").unwrap(), "0.5000");
        assert_eq!(s.get(u, "det_15_mean").unwrap(), "100.00");
        assert_eq!(s.get(u, "latency_mean").unwrap(), "3.000");
        // 0.5 collisions per episode against 2.0.
        assert_eq!(s.get(u, "collision_reduction_pct").unwrap(), "75.00");
        let nd = s.rows.iter().find(|r| r[0] == "NoDetect").unwrap();
        assert_eq!(s.get(nd, "latency_mean").unwrap(), "");
        assert_eq!(s.get(nd, "R_3").unwrap(), "");
        let h = &r.heatmap_detection;
        assert_eq!(h.header, vec!["method", "Pass->Block", "Help->Comp"]);
        assert_eq!(h.rows[0], vec!["uatom", "100.0", "50.0"]);
    }

    #[test]
    fn markdown_uses_dash_for_missing() {
        let dir = tempfile::tempdir().unwrap();
        episodes_csv(dir.path());
        let out = dir.path().join("report");
        let md = generate(dir.path(), &out, "Blend").unwrap();
        assert!(md.contains("| NoDetect | 2 |"));
        assert!(md.contains("—"));
        assert!(md.contains("uatom: post-switch collisions reduced by 75.00%"));
        let again = generate(dir.path(), &out, "Blend").unwrap();
        assert_eq!(md, again);
    }

    #[test]
    fn table_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1".into(), "".into()]);
        t.push(vec!["x,y".into(), "2.5".into()]);
        let p = dir.path().join("t.csv");
        t.write(&p).unwrap();
        assert_eq!(Table::read(&p).unwrap(), t);
        assert_eq!(t.num(&t.rows[0], "b").unwrap(), None);
        assert_eq!(t.num(&t.rows[1], "b").unwrap(), Some(2.5));
    }
}
