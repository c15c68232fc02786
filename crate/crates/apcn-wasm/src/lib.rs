//! Browser bindings: a loaded two-level model plus the glimpse sensor,
//! exposed to a static demo page. Images cross the boundary as flat
//! `Float64Array`s in `[0,1]`, panels come back as RGBA bytes for a canvas.

#![cfg(target_arch = "wasm32")]

use apcn_core::autodiff::{ParamStore, Tensor};
use apcn_core::checkpoint;
use apcn_core::config::ApcnConfig;
use apcn_core::glimpse;
use apcn_core::model::{export_parse_tree, Apcn, EpisodeModel, Mode};
use apcn_core::render;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn err_js(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn tensor_from(image: &[f64], side: usize) -> Result<Tensor, JsValue> {
    if image.len() != side * side {
        return Err(JsValue::from_str(&format!(
            "expected {} pixels, got {}",
            side * side,
            image.len()
        )));
    }
    Ok(Tensor::new(vec![side, side], image.to_vec()))
}

/// RGBA panel with its dimensions, ready for `ImageData`.
#[wasm_bindgen]
pub struct Panel {
    width: u32,
    height: u32,
    rgba: Vec<u8>,
}

#[wasm_bindgen]
impl Panel {
    #[wasm_bindgen(getter)]
    pub fn width(&self) -> u32 {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> u32 {
        self.height
    }

    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }
}

fn to_panel(img: image::RgbImage) -> Panel {
    let (width, height) = img.dimensions();
    let mut rgba = Vec::with_capacity((width * height * 4) as usize);
    for p in img.pixels() {
        rgba.extend_from_slice(&[p.0[0], p.0[1], p.0[2], 255]);
    }
    Panel {
        width,
        height,
        rgba,
    }
}

/// Stateless glimpse extraction for the sensor explorer: returns the patch
/// as a flat array (its side is `round(scale · n)`).
#[wasm_bindgen]
pub fn extract_glimpse(
    image: &[f64],
    side: usize,
    lx: f64,
    ly: f64,
    scale: f64,
) -> Result<Vec<f64>, JsValue> {
    let img = tensor_from(image, side)?;
    let patch = glimpse::extract_data(&img, (lx, ly), scale).map_err(err_js)?;
    Ok(patch.vals().to_vec())
}

#[wasm_bindgen]
pub fn glimpse_side(side: usize, scale: f64) -> usize {
    glimpse::patch_side(side, scale)
}

/// A trained two-level model bound to its configuration.
#[wasm_bindgen]
pub struct Demo {
    cfg: ApcnConfig,
    store: ParamStore,
    model: Apcn,
}

#[wasm_bindgen]
impl Demo {
    /// Load from checkpoint bytes (an `apcn2` checkpoint for the preset
    /// named by `dataset`: mnist, fashion or omniglot).
    #[wasm_bindgen(constructor)]
    pub fn new(checkpoint_bytes: &[u8], dataset: &str) -> Result<Demo, JsValue> {
        let cfg = ApcnConfig::preset(dataset).map_err(err_js)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Apcn::new(&mut store, &cfg, &mut rng);
        checkpoint::load_into_bytes(checkpoint_bytes, &mut store, "apcn2", cfg.arch_digest())
            .map_err(err_js)?;
        Ok(Demo { cfg, store, model })
    }

    #[wasm_bindgen(getter)]
    pub fn image_side(&self) -> usize {
        self.cfg.image_side
    }

    #[wasm_bindgen(getter)]
    pub fn macro_steps(&self) -> usize {
        self.cfg.macro_steps
    }

    /// Parse tree of one evaluation episode, as JSON.
    pub fn parse_tree(&self, image: &[f64], seed: u64) -> Result<String, JsValue> {
        let img = tensor_from(image, self.cfg.image_side)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tape, trace) = self
            .model
            .run_episode(&self.store, &img, &Mode::Eval, &mut rng)
            .map_err(err_js)?;
        let tree = export_parse_tree(&tape, &trace).map_err(err_js)?;
        serde_json::to_string(&tree).map_err(|e| err_js(e))
    }

    /// Five-row parse panel for one evaluation episode.
    pub fn parse_panel(&self, image: &[f64], seed: u64, upscale: u32) -> Result<Panel, JsValue> {
        let img = tensor_from(image, self.cfg.image_side)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tape, trace) = self
            .model
            .run_episode(&self.store, &img, &Mode::Eval, &mut rng)
            .map_err(err_js)?;
        let panel = render::parse_panel(&tape, &trace, upscale).map_err(err_js)?;
        Ok(to_panel(panel))
    }

    /// Completion panel with prediction errors zeroed from `mask_from` on.
    pub fn hallucinate_panel(
        &self,
        image: &[f64],
        mask_from: usize,
        seed: u64,
        upscale: u32,
    ) -> Result<Panel, JsValue> {
        let img = tensor_from(image, self.cfg.image_side)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tape_n, trace_n) = self
            .model
            .run_episode(&self.store, &img, &Mode::Eval, &mut rng)
            .map_err(err_js)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mode = Mode::hallucinate_from(mask_from, self.cfg.macro_steps);
        let (tape_h, trace_h) = self
            .model
            .run_episode(&self.store, &img, &mode, &mut rng)
            .map_err(err_js)?;
        let panel = render::hallucination_panel((&tape_n, &trace_n), (&tape_h, &trace_h), upscale)
            .map_err(err_js)?;
        Ok(to_panel(panel))
    }

    /// Swap top-level vectors between two inputs after `swap_after`
    /// macro-steps and complete both; returns the composition panel.
    pub fn compose_panel(
        &self,
        image_a: &[f64],
        image_b: &[f64],
        swap_after: usize,
        seed: u64,
        upscale: u32,
    ) -> Result<Panel, JsValue> {
        let a = tensor_from(image_a, self.cfg.image_side)?;
        let b = tensor_from(image_b, self.cfg.image_side)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tape_a, trace_a) = self
            .model
            .run_episode(&self.store, &a, &Mode::Eval, &mut rng)
            .map_err(err_js)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tape_b, trace_b) = self
            .model
            .run_episode(&self.store, &b, &Mode::Eval, &mut rng)
            .map_err(err_js)?;
        let (ha, hb) = self
            .model
            .swap_vectors(
                &self.store,
                (&tape_a, &trace_a),
                (&tape_b, &trace_b),
                swap_after,
            )
            .map_err(err_js)?;
        let panel = render::compose_panel(
            (&tape_a, &trace_a),
            (&tape_b, &trace_b),
            (&ha.0, &ha.1),
            (&hb.0, &hb.1),
            upscale,
        )
        .map_err(err_js)?;
        Ok(to_panel(panel))
    }

    /// Final reconstruction of an evaluation episode, as a flat image.
    pub fn reconstruct(&self, image: &[f64], seed: u64) -> Result<Vec<f64>, JsValue> {
        let img = tensor_from(image, self.cfg.image_side)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tape, trace) = self
            .model
            .run_episode(&self.store, &img, &Mode::Eval, &mut rng)
            .map_err(err_js)?;
        Ok(tape.vals(trace.final_recon()).to_vec())
    }
}
