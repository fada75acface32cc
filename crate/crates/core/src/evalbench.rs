//! Probe/gallery retrieval, rank-k and mAP metrics, and the attack evaluation protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::geometry::WarpPlan;
use crate::imagecore::{Image, Mask, Pattern};
use crate::reid::{score, ReIDModel};
use crate::rng::{derive_seed, seeded};

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryItem {
    pub embedding: Vec<f64>,
    pub identity: u32,
    pub camera: u32,
    pub adversarial: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    items: Vec<GalleryItem>,
}

impl Gallery {
    pub fn new(items: Vec<GalleryItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("gallery is empty".into()));
        }
        Ok(Self { items })
    }

    /// Embeds `(image, identity, camera, adversarial)` tuples with `model`.
    pub fn from_images(model: &ReIDModel, images: &[(Image, u32, u32, bool)]) -> Result<Self> {
        let items = images
            .iter()
            .map(|(img, identity, camera, adversarial)| {
                Ok(GalleryItem {
                    embedding: model.embed(img)?,
                    identity: *identity,
                    camera: *camera,
                    adversarial: *adversarial,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(items)
    }

    pub fn items(&self) -> &[GalleryItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeInfo {
    pub identity: u32,
    pub camera: u32,
    pub adversarial: bool,
}

/// Which gallery items count as correct matches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relevance {
    /// Same identity from another camera; same identity from the probe's own
    /// camera is dropped from the ranking.
    CrossCamera,
    /// Any image of the given identity.
    Identity(u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResult {
    pub probe: ProbeInfo,
    /// `(gallery index, score)` by descending score, ties by ascending index.
    pub ranked: Vec<(usize, f64)>,
    /// Relevance flag per ranked position.
    pub relevant: Vec<bool>,
}

impl QueryResult {
    pub fn relevant_count(&self) -> usize {
        self.relevant.iter().filter(|r| **r).count()
    }

    /// 1-based rank of the first relevant item.
    pub fn first_relevant_rank(&self) -> Option<usize> {
        self.relevant.iter().position(|r| *r).map(|p| p + 1)
    }

    /// Mean score of the relevant items.
    pub fn mean_relevant_score(&self) -> Option<f64> {
        let n = self.relevant_count();
        (n > 0).then(|| {
            self.ranked
                .iter()
                .zip(&self.relevant)
                .filter(|(_, r)| **r)
                .map(|((_, s), _)| s)
                .sum::<f64>()
                / n as f64
        })
    }
}

/// Ranks a gallery against a probe embedding.
pub fn rank_gallery(probe_embedding: &[f64], probe: ProbeInfo, gallery: &Gallery, relevance: Relevance) -> Result<QueryResult> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("gallery is empty".into()));
    }
    let mut ranked: Vec<(usize, f64)> = Vec::with_capacity(gallery.len());
    let mut flags = Vec::with_capacity(gallery.len());
    for (i, item) in gallery.items.iter().enumerate() {
        let same_id = item.identity == probe.identity;
        if relevance == Relevance::CrossCamera && same_id && item.camera == probe.camera {
            continue;
        }
        ranked.push((i, score(probe_embedding, &item.embedding)));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    for &(i, _) in &ranked {
        let item = &gallery.items[i];
        flags.push(match relevance {
            Relevance::CrossCamera => item.identity == probe.identity && item.camera != probe.camera,
            Relevance::Identity(id) => item.identity == id,
        });
    }
    Ok(QueryResult { probe, ranked, relevant: flags })
}

/// Embeds the probe and ranks the gallery under the cross-camera convention.
pub fn run_query(model: &ReIDModel, probe: &Image, info: ProbeInfo, gallery: &Gallery) -> Result<QueryResult> {
    run_query_with(model, probe, info, gallery, Relevance::CrossCamera)
}

pub fn run_query_with(model: &ReIDModel, probe: &Image, info: ProbeInfo, gallery: &Gallery, relevance: Relevance) -> Result<QueryResult> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("gallery is empty".into()));
    }
    rank_gallery(&model.embed(probe)?, info, gallery, relevance)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankK {
    pub accuracy: f64,
    pub requested_k: usize,
    /// Queries whose ranking was shorter than `k`.
    pub clamped_queries: usize,
}

/// Fraction of queries with a relevant item in their top `k`.
pub fn rank_k_accuracy(results: &[QueryResult], k: usize) -> Result<RankK> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if results.is_empty() {
        return Err(Error::InvalidArgument("no query results".into()));
    }
    let mut hits = 0;
    let mut clamped = 0;
    for r in results {
        let kk = if k > r.ranked.len() {
            clamped += 1;
            r.ranked.len()
        } else {
            k
        };
        if r.relevant[..kk].iter().any(|x| *x) {
            hits += 1;
        }
    }
    if clamped > 0 {
        warn!("rank-{k}: {clamped} queries have fewer than {k} ranked items; k clamped");
    }
    Ok(RankK {
        accuracy: hits as f64 / results.len() as f64,
        requested_k: k,
        clamped_queries: clamped,
    })
}

/// Average precision of one ranking, `None` without relevant items.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let total = relevant.iter().filter(|r| **r).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, r) in relevant.iter().enumerate() {
        if *r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapResult {
    pub map: f64,
    pub evaluated: usize,
    /// Queries excluded because nothing in their gallery was relevant.
    pub skipped: usize,
}

pub fn mean_average_precision(results: &[QueryResult]) -> Result<MapResult> {
    let aps: Vec<f64> = results.iter().filter_map(|r| average_precision(&r.relevant)).collect();
    if aps.is_empty() {
        return Err(Error::Protocol("no query has a relevant gallery item".into()));
    }
    Ok(MapResult {
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        evaluated: aps.len(),
        skipped: results.len() - aps.len(),
    })
}

/// Mean over queries of the mean similarity to relevant items.
pub fn mean_similarity(results: &[QueryResult]) -> Option<f64> {
    let v: Vec<f64> = results.iter().filter_map(|r| r.mean_relevant_score()).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    pub queries: usize,
    /// Adversary images from other cameras placed in each gallery.
    pub adversary_gallery_size: usize,
    /// Distractor identities per gallery; `None` uses every available one.
    pub distractor_identities: Option<usize>,
    /// Images per distractor identity; `None` uses all of them.
    pub distractor_images_per_identity: Option<usize>,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            queries: 100,
            adversary_gallery_size: 12,
            distractor_identities: None,
            distractor_images_per_identity: None,
            seed: 0,
        }
    }
}

/// Images and the pattern for one evaluation.
pub struct Scenario<'a> {
    /// Adversary images with their anchor quads (all one identity).
    pub adversary: &'a [LabeledImage],
    /// Candidate distractor images; the adversary identity is ignored if present.
    pub distractors: &'a [LabeledImage],
    /// Identity to impersonate, which must be among the distractors.
    pub target: Option<u32>,
    pub pattern: &'a Pattern,
    pub mask: &'a Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub condition: String,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub ss: f64,
    pub queries: usize,
    pub skipped: usize,
}

/// Clean minus attacked for a pair of rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub condition: String,
    pub rank1: f64,
    pub map: f64,
    pub ss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub deltas: Vec<DeltaRow>,
}

pub const CLEAN_SELF: &str = "clean self-match";
pub const ATTACKED_SELF: &str = "attacked self-match";
pub const CLEAN_TARGET: &str = "clean target-match";
pub const ATTACKED_TARGET: &str = "attacked target-match";

impl MetricsTable {
    pub fn row(&self, condition: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn delta(&self, condition: &str) -> Option<&DeltaRow> {
        self.deltas.iter().find(|r| r.condition == condition)
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.condition.len()).chain([9]).max().unwrap_or(9);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}  {:>7}",
            "condition", "rank-1", "rank-5", "rank-10", "mAP", "ss", "queries"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>7.3}  {:>7.3}  {:>7.3}  {:>7.3}  {:>7.3}  {:>7}",
                r.condition, r.rank1, r.rank5, r.rank10, r.map, r.ss, r.queries
            );
        }
        if !self.deltas.is_empty() {
            let _ = writeln!(s);
            let _ = writeln!(s, "{:<width$}  {:>7}  {:>7}  {:>7}", "drop", "rank-1", "mAP", "ss");
            for d in &self.deltas {
                let _ = writeln!(s, "{:<width$}  {:>7.3}  {:>7.3}  {:>7.3}", d.condition, d.rank1, d.map, d.ss);
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition,rank1,rank5,rank10,map,ss,queries,skipped,delta_rank1,delta_map,delta_ss\n");
        for r in &self.rows {
            let d = self.deltas.iter().find(|d| r.condition.ends_with(d.condition.as_str()) && r.condition.starts_with("attacked"));
            let (a, b, c) = match d {
                Some(d) => (format!("{:.3}", d.rank1), format!("{:.3}", d.map), format!("{:.3}", d.ss)),
                None => (String::new(), String::new(), String::new()),
            };
            let _ = writeln!(
                s,
                "{},{:.3},{:.3},{:.3},{:.3},{:.3},{},{},{a},{b},{c}",
                r.condition, r.rank1, r.rank5, r.rank10, r.map, r.ss, r.queries, r.skipped
            );
        }
        s
    }

    pub fn save(&self, text_path: &Path, csv_path: &Path) -> Result<()> {
        fs::write(text_path, self.to_text())?;
        fs::write(csv_path, self.to_csv())?;
        Ok(())
    }
}

fn metrics_row(condition: &str, results: &[QueryResult]) -> Result<MetricsRow> {
    let map = mean_average_precision(results)?;
    Ok(MetricsRow {
        condition: condition.to_string(),
        rank1: rank_k_accuracy(results, 1)?.accuracy,
        rank5: rank_k_accuracy(results, 5)?.accuracy,
        rank10: rank_k_accuracy(results, 10)?.accuracy,
        map: map.map,
        ss: mean_similarity(results).unwrap_or(0.0),
        queries: results.len(),
        skipped: map.skipped,
    })
}

fn delta(condition: &str, clean: &MetricsRow, attacked: &MetricsRow) -> DeltaRow {
    DeltaRow {
        condition: condition.to_string(),
        rank1: clean.rank1 - attacked.rank1,
        map: clean.map - attacked.map,
        ss: clean.ss - attacked.ss,
    }
}

/// Runs the clean and attacked query sets over shared per-query galleries.
///
/// Each query takes one adversary probe, up to `adversary_gallery_size`
/// adversary images from other cameras and the distractor images. Attacked
/// conditions overlay the pattern on the probe and on the adversary gallery
/// images; distractors stay clean.
pub fn run_attack_evaluation(model: &ReIDModel, scenario: &Scenario, spec: &EvalSpec) -> Result<MetricsTable> {
    let adv = scenario.adversary;
    let first = adv.first().ok_or_else(|| Error::Config("no adversary images".into()))?;
    let adversary_id = first.identity;
    if adv.iter().any(|li| li.identity != adversary_id) {
        return Err(Error::Config("adversary images mix identities".into()));
    }
    let cams: BTreeSet<u32> = adv.iter().map(|li| li.camera).collect();
    if cams.len() < 2 {
        return Err(Error::Config("adversary images must span at least 2 cameras".into()));
    }
    if spec.queries == 0 || spec.adversary_gallery_size == 0 {
        return Err(Error::Config("queries and adversary_gallery_size must be positive".into()));
    }
    let mut by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, li) in scenario.distractors.iter().enumerate() {
        if li.identity != adversary_id {
            by_identity.entry(li.identity).or_default().push(i);
        }
    }
    if let Some(t) = scenario.target {
        if t == adversary_id {
            return Err(Error::Config("target identity equals the adversary".into()));
        }
        if !by_identity.contains_key(&t) {
            return Err(Error::Config(format!("target identity {t} has no gallery images")));
        }
    }
    let wanted = spec.distractor_identities.unwrap_or(by_identity.len());
    if wanted > by_identity.len() || (spec.distractor_identities.is_none() && by_identity.is_empty()) {
        return Err(Error::Config(format!(
            "{wanted} distractor identities requested, {} available",
            by_identity.len()
        )));
    }
    if scenario.target.is_some() && wanted == 0 {
        return Err(Error::Config("impersonation evaluation needs the target among the distractors".into()));
    }

    let distractor_emb = scenario
        .distractors
        .iter()
        .map(|li| if li.identity != adversary_id { model.embed(&li.image).map(Some) } else { Ok(None) })
        .collect::<Result<Vec<_>>>()?;
    let clean_emb = adv.iter().map(|li| model.embed(&li.image)).collect::<Result<Vec<_>>>()?;
    let attacked_emb = adv
        .iter()
        .map(|li| {
            let plan = WarpPlan::for_quad(scenario.mask, &li.quad, li.image.height(), li.image.width())?;
            model.embed(&plan.overlay(&li.image, scenario.pattern.raster())?)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = seeded(derive_seed(spec.seed, "eval/queries"));
    let mut probe_order: Vec<usize> = Vec::new();
    let ids: Vec<u32> = by_identity.keys().copied().collect();
    let mut clean_self = Vec::with_capacity(spec.queries);
    let mut attacked_self = Vec::with_capacity(spec.queries);
    let mut clean_target = Vec::new();
    let mut attacked_target = Vec::new();
    for _ in 0..spec.queries {
        if probe_order.is_empty() {
            probe_order = (0..adv.len()).collect();
            probe_order.shuffle(&mut rng);
        }
        let p = probe_order.pop().expect("refilled");
        let probe_cam = adv[p].camera;
        let others: Vec<usize> = (0..adv.len()).filter(|&j| adv[j].camera != probe_cam).collect();
        let adv_gallery: Vec<usize> = others
            .choose_multiple(&mut rng, spec.adversary_gallery_size.min(others.len()))
            .copied()
            .collect();
        let mut chosen_ids: Vec<u32> = match spec.distractor_identities {
            None => ids.clone(),
            Some(n) => {
                let mut pool: Vec<u32> = ids.iter().copied().filter(|i| Some(*i) != scenario.target).collect();
                pool.shuffle(&mut rng);
                let take = if scenario.target.is_some() { n - 1 } else { n };
                let mut c: Vec<u32> = pool.into_iter().take(take).collect();
                c.extend(scenario.target);
                c.sort_unstable();
                c
            }
        };
        chosen_ids.dedup();
        let mut distractor_idx = Vec::new();
        for id in &chosen_ids {
            let imgs = &by_identity[id];
            match spec.distractor_images_per_identity {
                None => distractor_idx.extend_from_slice(imgs),
                Some(m) => distractor_idx.extend(imgs.choose_multiple(&mut rng, m.min(imgs.len())).copied()),
            }
        }
        let probe = ProbeInfo {
            identity: adversary_id,
            camera: probe_cam,
            adversarial: false,
        };
        for attacked in [false, true] {
            let adv_emb = if attacked { &attacked_emb } else { &clean_emb };
            let mut items: Vec<GalleryItem> = adv_gallery
                .iter()
                .map(|&j| GalleryItem {
                    embedding: adv_emb[j].clone(),
                    identity: adversary_id,
                    camera: adv[j].camera,
                    adversarial: attacked,
                })
                .collect();
            items.extend(distractor_idx.iter().map(|&d| {
                let li = &scenario.distractors[d];
                GalleryItem {
                    embedding: distractor_emb[d].clone().expect("distractor embedded"),
                    identity: li.identity,
                    camera: li.camera,
                    adversarial: false,
                }
            }));
            let gallery = Gallery::new(items)?;
            let info = ProbeInfo { adversarial: attacked, ..probe };
            let self_result = rank_gallery(&adv_emb[p], info, &gallery, Relevance::CrossCamera)?;
            let target_result = match scenario.target {
                Some(t) => Some(rank_gallery(&adv_emb[p], info, &gallery, Relevance::Identity(t))?),
                None => None,
            };
            if attacked {
                attacked_self.push(self_result);
                attacked_target.extend(target_result);
            } else {
                clean_self.push(self_result);
                clean_target.extend(target_result);
            }
        }
    }

    let mut table = MetricsTable::default();
    let cs = metrics_row(CLEAN_SELF, &clean_self)?;
    let as_ = metrics_row(ATTACKED_SELF, &attacked_self)?;
    table.deltas.push(delta("self-match", &cs, &as_));
    table.rows.push(cs);
    table.rows.push(as_);
    if scenario.target.is_some() {
        let ct = metrics_row(CLEAN_TARGET, &clean_target)?;
        let at = metrics_row(ATTACKED_TARGET, &attacked_target)?;
        table.deltas.push(delta("target-match", &ct, &at));
        table.rows.push(ct);
        table.rows.push(at);
    }
    Ok(table)
}
