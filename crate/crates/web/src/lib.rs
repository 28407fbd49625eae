//! Browser bindings. Each export returns JSON consumed by `www/index.html`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use tapd::evalkit::{ade, fde, MISS_THRESHOLD};
use tapd::numkit::cosine_alpha;
use tapd::scenegen::{generate_scene, truncate_history, GeneratorConfig, TruncationSpec};

type Path = Vec<[f64; 2]>;

#[derive(Serialize)]
pub struct AgentView {
    pub aoi: bool,
    /// Steps the truncated input no longer contains.
    pub dropped: Path,
    pub observed: Path,
    pub future: Path,
}

#[derive(Serialize)]
pub struct SceneView {
    pub tau: usize,
    pub intervals: usize,
    pub observed_steps: usize,
    pub lanes: Vec<Path>,
    pub agents: Vec<AgentView>,
}

pub fn scene_view(seed: u64, tau: usize) -> Result<SceneView, String> {
    let cfg = GeneratorConfig::default();
    let scene = generate_scene(seed, &cfg).map_err(|e| e.to_string())?;
    let tl = scene.timeline;
    let x = truncate_history(&scene, &TruncationSpec::for_timeline(&tl, tau)).map_err(|e| e.to_string())?;
    let start = tl.observed() - x.steps;
    let lanes = (0..scene.map.polylines)
        .map(|p| {
            let mut pts: Path = (0..scene.map.segments).map(|s| {
                let seg = scene.map.segment(p, s);
                [seg[0], seg[1]]
            }).collect();
            let last = scene.map.segment(p, scene.map.segments - 1);
            pts.push([last[0] + last[2], last[1] + last[3]]);
            pts
        })
        .collect();
    let agents = scene
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let pos = |t: usize| {
                let s = a.state(t);
                [s[0], s[1]]
            };
            AgentView {
                aoi: scene.aoi_indices.contains(&i),
                dropped: (0..start).map(pos).collect(),
                observed: (start..tl.observed()).map(pos).collect(),
                future: (tl.observed()..tl.total()).map(pos).collect(),
            }
        })
        .collect();
    Ok(SceneView { tau, intervals: tl.intervals, observed_steps: x.steps, lanes, agents })
}

/// Distillation weight per epoch `0..=epochs`.
pub fn alpha_curve(epochs: usize) -> Result<Vec<f64>, String> {
    (0..=epochs).map(|e| cosine_alpha(e, epochs).map_err(|e| e.to_string())).collect()
}

#[derive(Serialize)]
pub struct Candidate {
    pub path: Path,
    pub ade: f64,
    pub fde: f64,
}

#[derive(Serialize)]
pub struct BestOfK {
    pub truth: Path,
    pub history: Path,
    pub candidates: Vec<Candidate>,
    pub best_ade: usize,
    pub best_fde: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss: bool,
    pub threshold: f64,
}

/// `k` candidates scattered around the first AOI's true future: each bends the
/// truth by a random end offset of up to `spread` meters, growing linearly in time.
pub fn best_of_k(seed: u64, k: usize, spread: f64) -> Result<BestOfK, String> {
    if k == 0 {
        return Err("K must be at least 1".into());
    }
    let scene = generate_scene(seed, &GeneratorConfig::default()).map_err(|e| e.to_string())?;
    let aoi = scene.aoi_indices[0];
    let truth = scene.future_positions(aoi);
    let tl = scene.timeline;
    let history: Path = (0..tl.observed()).map(|t| {
        let s = scene.agents[aoi].state(t);
        [s[0], s[1]]
    }).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let n = truth.len() as f64;
    let mut candidates = Vec::with_capacity(k);
    for _ in 0..k {
        let end = [rng.random_range(-spread..=spread), rng.random_range(-spread..=spread)];
        let path: Path = truth
            .iter()
            .enumerate()
            .map(|(t, p)| {
                let w = (t + 1) as f64 / n;
                [p[0] + w * end[0], p[1] + w * end[1]]
            })
            .collect();
        let a = ade(&path, &truth).map_err(|e| e.to_string())?;
        let f = fde(&path, &truth).map_err(|e| e.to_string())?;
        candidates.push(Candidate { path, ade: a, fde: f });
    }
    let argmin = |key: fn(&Candidate) -> f64| {
        (0..k).fold(0, |b, i| if key(&candidates[i]) < key(&candidates[b]) { i } else { b })
    };
    let (best_ade, best_fde) = (argmin(|c| c.ade), argmin(|c| c.fde));
    let min_fde = candidates[best_fde].fde;
    Ok(BestOfK {
        min_ade: candidates[best_ade].ade,
        min_fde,
        miss: min_fde > MISS_THRESHOLD,
        threshold: MISS_THRESHOLD,
        best_ade,
        best_fde,
        truth,
        history,
        candidates,
    })
}

fn to_json<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = sceneView)]
pub fn scene_view_js(seed: u32, tau: usize) -> Result<String, JsValue> {
    to_json(scene_view(u64::from(seed), tau))
}

#[wasm_bindgen(js_name = alphaCurve)]
pub fn alpha_curve_js(epochs: usize) -> Result<String, JsValue> {
    to_json(alpha_curve(epochs))
}

#[wasm_bindgen(js_name = bestOfK)]
pub fn best_of_k_js(seed: u32, k: usize, spread: f64) -> Result<String, JsValue> {
    to_json(best_of_k(u64::from(seed), k, spread))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_moves_steps_to_dropped() {
        let full = scene_view(3, 4).unwrap();
        let short = scene_view(3, 1).unwrap();
        assert_eq!(full.observed_steps, 20);
        assert_eq!(short.observed_steps, 5);
        for (f, s) in full.agents.iter().zip(&short.agents) {
            assert!(f.dropped.is_empty());
            assert_eq!(s.dropped.len(), 15);
            assert_eq!(s.observed[..], f.observed[15..]);
            assert_eq!(f.future, s.future);
        }
        assert!(scene_view(3, 0).is_err());
        assert!(scene_view(3, 5).is_err());
    }

    #[test]
    fn alpha_endpoints() {
        let a = alpha_curve(30).unwrap();
        assert_eq!((a[0], a[15], a[30]), (0.0, 0.5, 1.0));
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
        assert!(alpha_curve(0).is_err());
    }

    #[test]
    fn best_of_k_picks_minimum() {
        let r = best_of_k(9, 6, 4.0).unwrap();
        assert_eq!(r.candidates.len(), 6);
        assert!(r.candidates.iter().all(|c| c.fde >= r.min_fde && c.ade >= r.min_ade));
        assert_eq!(r.miss, r.min_fde > 2.0);
        let exact = best_of_k(9, 1, 0.0).unwrap();
        assert_eq!((exact.min_ade, exact.min_fde, exact.miss), (0.0, 0.0, false));
        assert!(best_of_k(9, 0, 1.0).is_err());
        assert!(serde_json::to_string(&r).unwrap().contains("\"candidates\""));
    }
}
