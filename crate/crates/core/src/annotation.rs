//! Annotation-pipeline statistics: Fleiss' kappa, catch-trial filtering,
//! three-vote label aggregation and human-in-the-loop selection.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default probability cut for sending an image back to annotators.
pub const DEFAULT_HITL_TAU: f64 = 0.35;

/// Per-item category counts; every row sums to `n_raters`.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingsMatrix {
    counts: Array2<u64>,
    n_raters: u64,
}

impl RatingsMatrix {
    pub fn new(counts: Array2<u64>, n_raters: u64) -> Result<Self> {
        for (i, row) in counts.rows().into_iter().enumerate() {
            let s: u64 = row.sum();
            if s != n_raters {
                return Err(Error::Input(format!("item {i} has {s} ratings, expected {n_raters}")));
            }
        }
        Ok(RatingsMatrix { counts, n_raters })
    }

    pub fn from_rows(rows: &[Vec<u64>], n_raters: u64) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Input("rating rows differ in category count".into()));
        }
        let flat: Vec<u64> = rows.iter().flatten().copied().collect();
        let counts = Array2::from_shape_vec((rows.len(), k), flat).expect("checked shape");
        Self::new(counts, n_raters)
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn n_raters(&self) -> u64 {
        self.n_raters
    }

    pub fn n_items(&self) -> usize {
        self.counts.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub kappa: f64,
    /// Mean observed agreement.
    pub p_bar: f64,
    /// Expected agreement by chance.
    pub p_e: f64,
    /// Set when every rating fell in one category, where the statistic is
    /// 0/0 and 1 is reported.
    pub degenerate: bool,
}

/// Fleiss' kappa `(P_bar - P_e) / (1 - P_e)`.
pub fn fleiss_kappa(m: &RatingsMatrix) -> Result<Kappa> {
    let n = m.n_raters;
    if n < 2 {
        return Err(Error::Input("Fleiss' kappa needs at least two raters per item".into()));
    }
    let items = m.n_items();
    if items == 0 {
        return Err(Error::Input("Fleiss' kappa needs at least one item".into()));
    }
    let nf = n as f64;
    let total = items as f64 * nf;
    let p_bar = m
        .counts
        .rows()
        .into_iter()
        .map(|row| {
            let agree: f64 = row.iter().map(|&c| (c * c) as f64).sum::<f64>() - nf;
            agree / (nf * (nf - 1.0))
        })
        .sum::<f64>()
        / items as f64;
    let p_e: f64 = m
        .counts
        .columns()
        .into_iter()
        .map(|col| {
            let p = col.sum() as f64 / total;
            p * p
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(Kappa {
            kappa: 1.0,
            p_bar,
            p_e,
            degenerate: true,
        });
    }
    Ok(Kappa {
        kappa: (p_bar - p_e) / (1.0 - p_e),
        p_bar,
        p_e,
        degenerate: false,
    })
}

/// One categorical judgement from the ratings CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rating {
    pub item_id: String,
    pub rater_id: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
}

/// Reads `item_id,rater_id,category[,task_id]` with a header row.
pub fn parse_ratings_csv(text: &str) -> Result<Vec<Rating>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::parse("ratings csv", e))?.clone();
    for required in ["item_id", "rater_id", "category"] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::parse("ratings csv", format!("missing column {required}")));
        }
    }
    if let Some(h) = headers.iter().find(|h| !["item_id", "rater_id", "category", "task_id"].contains(h)) {
        return Err(Error::parse("ratings csv", format!("unknown column {h}")));
    }
    let mut out = Vec::new();
    for (i, rec) in reader.deserialize::<Rating>().enumerate() {
        let r = rec.map_err(|e| Error::parse(format!("ratings csv row {}", i + 2), e))?;
        if r.item_id.is_empty() || r.rater_id.is_empty() || r.category.is_empty() {
            return Err(Error::parse(format!("ratings csv row {}", i + 2), "empty field"));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn load_ratings_csv(path: &Path) -> Result<Vec<Rating>> {
    parse_ratings_csv(&crate::error::read_to_string(path)?)
}

pub fn format_ratings_csv(ratings: &[Rating]) -> String {
    let with_task = ratings.iter().any(|r| r.task_id.is_some());
    let mut w = csv::Writer::from_writer(Vec::new());
    if with_task {
        w.write_record(["item_id", "rater_id", "category", "task_id"]).expect("in-memory write");
    } else {
        w.write_record(["item_id", "rater_id", "category"]).expect("in-memory write");
    }
    for r in ratings {
        let mut rec = vec![r.item_id.as_str(), r.rater_id.as_str(), r.category.as_str()];
        if with_task {
            rec.push(r.task_id.as_deref().unwrap_or(""));
        }
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

/// Counts per item (sorted by id) and category (sorted by name). Every item
/// must be rated by the same number of distinct raters.
pub fn ratings_to_matrix(ratings: &[Rating]) -> Result<(RatingsMatrix, Vec<String>, Vec<String>)> {
    let categories: Vec<String> = ratings
        .iter()
        .map(|r| r.category.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut per_item: BTreeMap<&str, (BTreeSet<&str>, Vec<u64>)> = BTreeMap::new();
    for r in ratings {
        let e = per_item
            .entry(&r.item_id)
            .or_insert_with(|| (BTreeSet::new(), vec![0; categories.len()]));
        if !e.0.insert(&r.rater_id) {
            return Err(Error::Input(format!("rater {} rated item {} twice", r.rater_id, r.item_id)));
        }
        let c = categories.binary_search(&r.category).expect("collected above");
        e.1[c] += 1;
    }
    let n_raters = per_item.values().next().map_or(0, |e| e.0.len() as u64);
    let items: Vec<String> = per_item.keys().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<u64>> = per_item.into_values().map(|e| e.1).collect();
    let m = RatingsMatrix::from_rows(&rows, n_raters)?;
    Ok((m, items, categories))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaReport {
    /// One matrix over all items.
    pub pooled: Kappa,
    /// Per annotation task, when tasks are given.
    pub per_task: BTreeMap<String, Kappa>,
    /// Unweighted mean of the per-task values.
    pub task_mean: Option<f64>,
}

/// Pooled kappa plus the per-task average. Ratings without a task id only
/// enter the pooled value.
pub fn kappa_report(ratings: &[Rating]) -> Result<KappaReport> {
    let (m, _, _) = ratings_to_matrix(ratings)?;
    let pooled = fleiss_kappa(&m)?;
    let mut by_task: BTreeMap<&str, Vec<Rating>> = BTreeMap::new();
    for r in ratings {
        if let Some(t) = &r.task_id {
            by_task.entry(t).or_default().push(r.clone());
        }
    }
    let mut per_task = BTreeMap::new();
    for (t, rs) in by_task {
        let (m, _, _) = ratings_to_matrix(&rs)?;
        per_task.insert(t.to_string(), fleiss_kappa(&m)?);
    }
    let task_mean = (!per_task.is_empty())
        .then(|| per_task.values().map(|k| k.kappa).sum::<f64>() / per_task.len() as f64);
    Ok(KappaReport {
        pooled,
        per_task,
        task_mean,
    })
}

/// Answer to one image grid: the set of image ids the worker selected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridAnswer {
    pub grid_id: String,
    pub is_catch: bool,
    pub selected: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitResult {
    pub hit_id: String,
    pub worker_id: String,
    pub grids: Vec<GridAnswer>,
}

/// Expected selection for every catch grid.
pub type CatchKey = BTreeMap<String, BTreeSet<String>>;

/// Keeps the HITs whose catch grids match the key exactly; a failed catch
/// drops the whole HIT.
pub fn filter_catch_trials(hits: &[HitResult], key: &CatchKey) -> Result<Vec<HitResult>> {
    let mut accepted = Vec::new();
    for hit in hits {
        let catches: Vec<&GridAnswer> = hit.grids.iter().filter(|g| g.is_catch).collect();
        if catches.is_empty() {
            return Err(Error::Input(format!("HIT {} has no catch grid", hit.hit_id)));
        }
        let mut pass = true;
        for g in catches {
            let expected = key
                .get(&g.grid_id)
                .ok_or_else(|| Error::Input(format!("no key for catch grid {}", g.grid_id)))?;
            pass &= &g.selected == expected;
        }
        if pass {
            accepted.push(hit.clone());
        }
    }
    Ok(accepted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agreement {
    No,
    PossibleNo,
    PossibleYes,
    DefiniteYes,
}

/// Label strength from exactly three annotator votes.
pub fn aggregate_labels(votes: &[bool]) -> Result<Agreement> {
    if votes.len() != 3 {
        return Err(Error::Input(format!("expected 3 votes, got {}", votes.len())));
    }
    Ok(match votes.iter().filter(|&&v| v).count() {
        3 => Agreement::DefiniteYes,
        2 => Agreement::PossibleYes,
        1 => Agreement::PossibleNo,
        _ => Agreement::No,
    })
}

/// Per-class aggregation for one image given each annotator's label vector.
pub fn aggregate_image(annotators: &[Vec<bool>]) -> Result<Vec<Agreement>> {
    if annotators.len() != 3 {
        return Err(Error::Input(format!("expected 3 annotators, got {}", annotators.len())));
    }
    let k = annotators[0].len();
    if annotators.iter().any(|a| a.len() != k) {
        return Err(Error::Input("annotator label vectors differ in length".into()));
    }
    (0..k)
        .map(|c| aggregate_labels(&[annotators[0][c], annotators[1][c], annotators[2][c]]))
        .collect()
}

/// Images whose score for a class is strictly above `tau`, per class.
/// Classes with no qualifying image are absent.
pub fn hitl_select(scores: &BTreeMap<String, Vec<f64>>, tau: f64) -> BTreeMap<usize, Vec<String>> {
    let mut out: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (image, s) in scores {
        for (c, &v) in s.iter().enumerate() {
            if v > tau {
                out.entry(c).or_default().push(image.clone());
            }
        }
    }
    out
}
