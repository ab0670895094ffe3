use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use halluc_core::pipeline::{confidence_interval, Interval, AGGREGATE, CSV_COLUMNS};

use crate::error::CliError;

/// Everything that identifies a cell apart from the seed.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub shot: usize,
    pub proposal: String,
    pub head: String,
    pub variant: String,
    pub m: usize,
    pub em_iters: String,
}

impl CellKey {
    pub fn hallucinates(&self) -> bool {
        self.m > 0 && self.variant != "none"
    }

    fn label(&self) -> String {
        format!(
            "K={} {} {} {} m={} em={}",
            self.shot, self.proposal, self.head, self.variant, self.m, self.em_iters
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub ap: f64,
    pub tp: f64,
    pub fp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub key: CellKey,
    pub seeds: Vec<SeedResult>,
    pub aggregate_ap: f64,
    pub aggregate_fp: f64,
}

impl Cell {
    fn ap_values(&self) -> Vec<f64> {
        self.seeds.iter().map(|s| s.ap).collect()
    }

    fn mean_fp(&self) -> f64 {
        self.seeds.iter().map(|s| s.fp).sum::<f64>() / self.seeds.len() as f64
    }

    fn ap_interval(&self) -> Option<Interval> {
        confidence_interval(&self.ap_values()).ok()
    }

    fn ap_of(&self, seed: u64) -> Option<f64> {
        self.seeds.iter().find(|s| s.seed == seed).map(|s| s.ap)
    }
}

/// A parsed results file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTable {
    pub source: String,
    pub cells: Vec<Cell>,
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, row: usize) -> Result<T, CliError> {
    let raw = rec.get(idx).unwrap_or("");
    raw.trim().parse().map_err(|_| {
        CliError::Parse(format!(
            "row {row}: column '{}' has unparseable value '{raw}'",
            CSV_COLUMNS[idx]
        ))
    })
}

/// Parses a results CSV. Rows are numbered from 1 at the header.
pub fn parse_csv(text: &str, source: &str) -> Result<RunTable, CliError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| CliError::Parse(format!("{source}: row 1: {e}")))?
        .clone();
    if header.len() < CSV_COLUMNS.len() || header.iter().zip(CSV_COLUMNS).any(|(a, b)| a != b) {
        return Err(CliError::Parse(format!("{source}: row 1: unexpected header")));
    }
    let mut cells: Vec<Cell> = Vec::new();
    let mut open: Option<Cell> = None;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| CliError::Parse(format!("{source}: row {row}: {e}")))?;
        if rec.len() != header.len() {
            return Err(CliError::Parse(format!(
                "{source}: row {row}: expected {} fields, found {}",
                header.len(),
                rec.len()
            )));
        }
        let wrap = |e: CliError| match e {
            CliError::Parse(m) => CliError::Parse(format!("{source}: {m}")),
            other => other,
        };
        let key = CellKey {
            shot: field(&rec, 1, row).map_err(wrap)?,
            proposal: rec[2].to_string(),
            head: rec[3].to_string(),
            variant: rec[4].to_string(),
            m: field(&rec, 5, row).map_err(wrap)?,
            em_iters: rec[6].to_string(),
        };
        let ap: f64 = field(&rec, 7, row).map_err(wrap)?;
        let tp: f64 = field(&rec, 8, row).map_err(wrap)?;
        let fp: f64 = field(&rec, 9, row).map_err(wrap)?;
        if let Some(c) = &open {
            if c.key != key {
                return Err(CliError::Parse(format!(
                    "{source}: row {row}: cell {} starts before the AGGREGATE row of {}",
                    key.label(),
                    c.key.label()
                )));
            }
        }
        if &rec[0] == AGGREGATE {
            let mut cell = open.take().ok_or_else(|| {
                CliError::Parse(format!("{source}: row {row}: AGGREGATE row without seed rows"))
            })?;
            cell.aggregate_ap = ap;
            cell.aggregate_fp = fp;
            cells.push(cell);
        } else {
            let seed: u64 = field(&rec, 0, row).map_err(wrap)?;
            open.get_or_insert_with(|| Cell {
                key,
                seeds: Vec::new(),
                aggregate_ap: f64::NAN,
                aggregate_fp: f64::NAN,
            })
            .seeds
            .push(SeedResult { seed, ap, tp, fp });
        }
    }
    if let Some(c) = open {
        return Err(CliError::Parse(format!(
            "{source}: cell {} has no AGGREGATE row",
            c.key.label()
        )));
    }
    if cells.is_empty() {
        return Err(CliError::Parse(format!("{source}: no rows")));
    }
    Ok(RunTable {
        source: source.to_string(),
        cells,
    })
}

pub fn load_csv(path: &Path) -> Result<RunTable, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_csv(&text, &path.display().to_string())
}

/// One directional check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// The hallucination-free partner of a cell, if present.
fn baseline<'a>(cells: &[&'a Cell], key: &CellKey) -> Option<&'a Cell> {
    let same = |c: &&&Cell| {
        c.key.shot == key.shot
            && c.key.proposal == key.proposal
            && c.key.head == key.head
            && c.key.em_iters == key.em_iters
    };
    cells
        .iter()
        .filter(same)
        .find(|c| c.key.m == 0 && c.key.variant == key.variant)
        .or_else(|| cells.iter().filter(same).find(|c| !c.key.hallucinates()))
        .copied()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_ap(c: &Cell) -> f64 {
    mean(&c.ap_values())
}

/// Directional checks over every cell that has the partners it needs.
pub fn checks(cells: &[&Cell]) -> Vec<Check> {
    let mut out = Vec::new();
    for c in cells.iter().filter(|c| c.key.hallucinates()) {
        let Some(b) = baseline(cells, &c.key) else { continue };
        let gain = mean_ap(c) - mean_ap(b);
        if c.key.shot == 1 {
            out.push(Check {
                name: format!("gain >= 0.02 [{}]", c.key.label()),
                passed: gain >= 0.02,
                detail: format!("{gain:+.4}"),
            });
        }
        out.push(Check {
            name: format!("FP below baseline [{}]", c.key.label()),
            passed: c.mean_fp() < b.mean_fp(),
            detail: format!("{:.2} vs {:.2}", c.mean_fp(), b.mean_fp()),
        });
    }

    let find = |key: &CellKey, em: &str| {
        cells
            .iter()
            .find(|c| c.key == CellKey { em_iters: em.to_string(), ..key.clone() })
            .copied()
    };
    for c in cells.iter().filter(|c| c.key.em_iters == "2") {
        if let Some(j) = find(&c.key, "joint") {
            let paired: Vec<(f64, f64)> = c
                .seeds
                .iter()
                .filter_map(|s| j.ap_of(s.seed).map(|a| (s.ap, a)))
                .collect();
            let wins = paired.iter().filter(|(e, j)| e > j).count();
            let needed = (0.7 * paired.len() as f64).ceil() as usize;
            out.push(Check {
                name: format!("EM >= joint [{}]", c.key.label()),
                passed: mean_ap(c) >= mean_ap(j) && wins >= needed,
                detail: format!("{:.4} vs {:.4}, wins {wins}/{}", mean_ap(c), mean_ap(j), paired.len()),
            });
        }
        if let Some(e1) = find(&c.key, "1") {
            out.push(Check {
                name: format!("EM-2 >= EM-1 [{}]", c.key.label()),
                passed: mean_ap(c) >= mean_ap(e1),
                detail: format!("{:.4} vs {:.4}", mean_ap(c), mean_ap(e1)),
            });
        }
    }

    let mut sweeps: BTreeMap<CellKey, Vec<&Cell>> = BTreeMap::new();
    for c in cells {
        sweeps.entry(CellKey { m: 0, ..c.key.clone() }).or_default().push(c);
    }
    for (k, group) in &sweeps {
        let Some(zero) = group.iter().find(|c| c.key.m == 0) else { continue };
        if group.len() < 3 || k.variant == "none" {
            continue;
        }
        let z = mean_ap(zero);
        let best = group
            .iter()
            .max_by(|a, b| mean_ap(a).total_cmp(&mean_ap(b)).then(a.key.m.cmp(&b.key.m)))
            .expect("non-empty group");
        let all_above = group.iter().all(|c| mean_ap(c) >= z);
        out.push(Check {
            name: format!("every m >= m=0, peak at m >= 1 [{}]", CellKey { m: 0, ..k.clone() }.label()),
            passed: all_above && best.key.m >= 1,
            detail: format!("peak m={} ({:.4}), m=0 {z:.4}", best.key.m, mean_ap(best)),
        });
    }

    let gain_at = |shot: usize, like: &CellKey| {
        let key = CellKey { shot, ..like.clone() };
        let c = cells.iter().find(|c| c.key == key)?;
        let b = baseline(cells, &key)?;
        Some(mean_ap(c) - mean_ap(b))
    };
    for c in cells.iter().filter(|c| c.key.shot == 1 && c.key.hallucinates()) {
        if let (Some(g1), Some(g10)) = (gain_at(1, &c.key), gain_at(10, &c.key)) {
            out.push(Check {
                name: format!("gain shrinks from K=1 to K=10 [{}]", c.key.label()),
                passed: g1 > g10,
                detail: format!("{g1:+.4} vs {g10:+.4}"),
            });
        }
    }
    out
}

fn interval_text(i: Option<Interval>) -> (String, String) {
    match i {
        Some(i) => (format!("{:.4}", i.mean), format!("{:.4}", i.half_width)),
        None => ("n/a".into(), "n/a".into()),
    }
}

/// Plot series: cells grouped by every key but one numeric axis.
fn plot_rows(cells: &[&Cell]) -> Vec<String> {
    let mut rows = Vec::new();
    let axes: [(&str, fn(&CellKey) -> usize, fn(&CellKey) -> CellKey); 2] = [
        ("m", |k| k.m, |k| CellKey { m: 0, ..k.clone() }),
        ("shot", |k| k.shot, |k| CellKey { shot: 0, ..k.clone() }),
    ];
    for (axis, x_of, strip) in axes {
        let mut groups: BTreeMap<CellKey, Vec<&Cell>> = BTreeMap::new();
        for c in cells {
            groups.entry(strip(&c.key)).or_default().push(c);
        }
        for (k, mut group) in groups {
            if group.len() < 2 {
                continue;
            }
            group.sort_by_key(|c| x_of(&c.key));
            let series = format!(
                "{}/{}/{}/{}/em{}",
                if axis == "m" { format!("K{}", k.shot) } else { format!("m{}", k.m) },
                k.proposal,
                k.head,
                k.variant,
                k.em_iters
            );
            for c in group {
                let (y, err) = interval_text(c.ap_interval());
                rows.push(format!("{series},{axis},{},{y},{err}", x_of(&c.key)));
            }
        }
    }
    rows
}

/// Markdown summary of one or more parsed runs.
pub fn render(tables: &[RunTable]) -> String {
    let mut s = String::from("# Run summary\n");
    for t in tables {
        let _ = writeln!(s, "\n## {}\n", t.source);
        s.push_str("| shot | proposal | head | variant | m | em | seeds | novel AP | ± 95% | TP | FP |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
        for c in &t.cells {
            let (m, hw) = interval_text(c.ap_interval());
            let tp = mean(&c.seeds.iter().map(|r| r.tp).collect::<Vec<_>>());
            let k = &c.key;
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} | {m} | {hw} | {tp:.1} | {:.1} |",
                k.shot,
                k.proposal,
                k.head,
                k.variant,
                k.m,
                k.em_iters,
                c.seeds.len(),
                c.mean_fp()
            );
        }
    }
    let all: Vec<&Cell> = tables.iter().flat_map(|t| &t.cells).collect();
    let checks = checks(&all);
    if !checks.is_empty() {
        s.push_str("\n## Checks\n\n");
        for c in &checks {
            let flag = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "- [{flag}] {}: {}", c.name, c.detail);
        }
    }
    let plot = plot_rows(&all);
    if !plot.is_empty() {
        s.push_str("\n## Plot data\n\n```csv\nseries,axis,x,y,err\n");
        for r in plot {
            s.push_str(&r);
            s.push('\n');
        }
        s.push_str("```\n");
    }
    s
}
