//! The planner: patch embedding, projector, causal transformer with rotary
//! sequence positions, an output head over `V'`, and indicator-routed
//! coordinate decoding.
//!
//! Sequence layout: visual tokens (view-major, patch row-major), then the
//! prompt stream (ego prefix, BOS, prompt words), then the target stream.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use spacetoken_diff::{checkpoint, Bindings, ParameterStore, Scalar, Tensor};

use crate::error::{Error, IoContext, Result};
use crate::geometry::{patch_coordinates, Coordinate3D, PatchGrid};
use crate::nn::{init_uniform, Linear, Mlp2};
use crate::pe::{encode, encode_bev, PeConfig, PeDecoder, PeScale, DECODER_SCALE, DEFAULT_BASE};
use crate::prompt::planning_prompt;
use crate::scene::{EgoStatusRecord, Scene, CHANNELS};
use crate::tokens::{
    build_digit_target_stream, build_target_stream, encode_prompt, render_output, scan_coordinates, Emitted,
    StreamElement, TokenStream, Vocab, BOS, EOS, TARGET_PREAMBLE,
};

pub const MODEL_CONFIG_FILE: &str = "model_config.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const PARAMS_FILE: &str = "params.ckpt";
const LN_EPS: f64 = 1e-5;
/// Input scale of the learned-MLP spatial encoder.
const LEARNED_PE_SCALE: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordMode {
    /// Coordinates enter as encodings and leave through the decoder.
    SpatialPe,
    /// Coordinates are read and written as digit tokens.
    DigitText,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialEncoder {
    Sinusoidal,
    /// Ablation: a two-layer perceptron on scaled coordinates replaces φ.
    LearnedMlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    /// Square image side the model expects.
    pub image: usize,
    pub cameras: usize,
    pub history: usize,
    pub horizon: usize,
    pub max_seq: usize,
    pub mode: CoordMode,
    pub inject_visual: bool,
    pub encode_text_coords: bool,
    pub encode_ego: bool,
    pub alpha: PeScale,
    pub pe_base: f64,
    pub rope_base: f64,
    pub spatial_encoder: SpatialEncoder,
    /// Ablation: one indicator decodes the whole trajectory.
    pub task_specific: bool,
    /// Feed generated waypoints back as `α·φ_bev(ĉ)`; otherwise the indicator row.
    pub feedback_pe: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 128,
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
            patch: 8,
            image: 64,
            cameras: 2,
            history: 2,
            horizon: 6,
            max_seq: 512,
            mode: CoordMode::SpatialPe,
            inject_visual: true,
            encode_text_coords: true,
            encode_ego: true,
            alpha: PeScale::default(),
            pe_base: DEFAULT_BASE,
            rope_base: 10_000.0,
            spatial_encoder: SpatialEncoder::Sinusoidal,
            task_specific: false,
            feedback_pe: true,
        }
    }
}

impl ModelConfig {
    /// Same shapes, digit-token coordinate interface, no spatial flags.
    pub fn digit_baseline(&self) -> Self {
        Self {
            mode: CoordMode::DigitText,
            inject_visual: false,
            encode_text_coords: false,
            encode_ego: false,
            task_specific: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.heads == 0 || self.layers == 0 || self.mlp_ratio == 0 {
            return bad("width, heads, layers and mlp_ratio must be positive".into());
        }
        if self.width % (2 * self.heads) != 0 {
            return bad(format!("width {} must be divisible by 2 x heads ({})", self.width, self.heads));
        }
        if self.patch == 0 || self.image % self.patch != 0 {
            return bad(format!("patch {} does not tile image {}", self.patch, self.image));
        }
        if self.cameras == 0 || self.horizon == 0 {
            return bad("cameras and horizon must be positive".into());
        }
        if self.mode == CoordMode::DigitText && (self.inject_visual || self.encode_text_coords || self.encode_ego || self.task_specific) {
            return bad("digit_text mode takes no spatial flags".into());
        }
        if !(self.rope_base > 1.0) {
            return bad(format!("rope_base must exceed 1, got {}", self.rope_base));
        }
        self.pe()?;
        Ok(())
    }

    pub fn pe(&self) -> Result<PeConfig> {
        PeConfig::new(self.width, self.pe_base)
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid { patch: self.patch, rows: self.image / self.patch, cols: self.image / self.patch }
    }

    pub fn visual_tokens(&self) -> usize {
        self.cameras * self.grid().len()
    }

    pub fn patch_features(&self) -> usize {
        CHANNELS * self.patch * self.patch
    }

    /// `e_ego` plus one slot per history frame.
    pub fn ego_slots(&self) -> usize {
        self.history + 2
    }

    pub fn spatial(&self) -> bool {
        self.mode == CoordMode::SpatialPe
    }

    /// Whether any encoding is ever scaled by α in this configuration.
    fn uses_alpha(&self) -> bool {
        self.spatial()
    }
}

mod names {
    pub const PATCH: &str = "patch";
    pub const PROJ: &str = "proj";
    pub const TOKENS: &str = "tok.embed";
    pub const EGO: &str = "ego.fc";
    pub const EGO_SLOT: &str = "ego.slot";
    pub const FINAL_G: &str = "final.ln.g";
    pub const FINAL_B: &str = "final.ln.b";
    pub const HEAD: &str = "head";
    pub const PENC: &str = "penc";
    pub const PSI_TRAJ: &str = "psi_traj";

    pub fn blk(i: usize, part: &str) -> String {
        format!("blk{i}.{part}")
    }
}

struct Layers {
    patch: Linear,
    proj: Mlp2,
    ego: Linear,
    head: Linear,
    psi: PeDecoder,
    psi_traj: Mlp2,
    penc: Mlp2,
}

impl Layers {
    fn new(cfg: &ModelConfig, vocab_len: usize) -> Self {
        let w = cfg.width;
        Self {
            patch: Linear::new(names::PATCH, cfg.patch_features(), w),
            proj: Mlp2::new(names::PROJ, w, w, w),
            ego: Linear::new(names::EGO, EgoStatusRecord::FEATURES, w),
            head: Linear::new(names::HEAD, w, vocab_len + 1),
            psi: PeDecoder::new(w, w),
            psi_traj: Mlp2::new(names::PSI_TRAJ, w, w, 2 * cfg.horizon),
            penc: Mlp2::new(names::PENC, 3, w, w),
        }
    }

    fn attn_qkv(i: usize, w: usize) -> Linear {
        Linear::new(names::blk(i, "attn.qkv"), w, 3 * w)
    }

    fn attn_out(i: usize, w: usize) -> Linear {
        Linear::new(names::blk(i, "attn.out"), w, w)
    }

    fn mlp(i: usize, cfg: &ModelConfig) -> Mlp2 {
        Mlp2::new(&names::blk(i, "mlp"), cfg.width, cfg.mlp_ratio * cfg.width, cfg.width)
    }
}

/// Fresh parameters for `cfg` over a vocabulary of `vocab_len` words (IND added).
pub fn init_params(cfg: &ModelConfig, vocab_len: usize, seed: u64) -> Result<ParameterStore<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    let w = cfg.width;
    let layers = Layers::new(cfg, vocab_len);
    layers.patch.register(&mut store, &mut rng)?;
    layers.proj.register(&mut store, &mut rng)?;
    store.insert(names::TOKENS, &[vocab_len + 1, w], init_uniform(&mut rng, w, (vocab_len + 1) * w))?;
    layers.ego.register(&mut store, &mut rng)?;
    store.insert(names::EGO_SLOT, &[cfg.history + 1, w], init_uniform(&mut rng, w, (cfg.history + 1) * w))?;
    for i in 0..cfg.layers {
        store.insert(names::blk(i, "ln1.g"), &[w], vec![1.0; w])?;
        store.insert(names::blk(i, "ln1.b"), &[w], vec![0.0; w])?;
        Layers::attn_qkv(i, w).register(&mut store, &mut rng)?;
        Layers::attn_out(i, w).register(&mut store, &mut rng)?;
        store.insert(names::blk(i, "ln2.g"), &[w], vec![1.0; w])?;
        store.insert(names::blk(i, "ln2.b"), &[w], vec![0.0; w])?;
        Layers::mlp(i, cfg).register(&mut store, &mut rng)?;
    }
    store.insert(names::FINAL_G, &[w], vec![1.0; w])?;
    store.insert(names::FINAL_B, &[w], vec![0.0; w])?;
    layers.head.register(&mut store, &mut rng)?;
    if cfg.spatial() {
        if cfg.task_specific {
            layers.psi_traj.register(&mut store, &mut rng)?;
        } else {
            layers.psi.register(&mut store, &mut rng)?;
        }
        if cfg.spatial_encoder == SpatialEncoder::LearnedMlp {
            layers.penc.register(&mut store, &mut rng)?;
        }
    }
    if cfg.uses_alpha() {
        cfg.alpha.register(&mut store)?;
    }
    Ok(store)
}

/// Per-scene model inputs that do not depend on parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInputs {
    /// `[visual_tokens, patch_features]`, view-major then patch row-major.
    pub patches: Vec<f32>,
    pub patch_coords: Vec<Coordinate3D>,
    pub ego_features: [f64; EgoStatusRecord::FEATURES],
    /// History positions, oldest first.
    pub ego_history: Vec<Coordinate3D>,
}

impl SceneInputs {
    pub fn from_scene(scene: &Scene, cfg: &ModelConfig) -> Result<Self> {
        if scene.views.len() != cfg.cameras {
            return Err(Error::Model(format!("scene has {} views, model expects {}", scene.views.len(), cfg.cameras)));
        }
        let grid = cfg.grid();
        let p = cfg.patch;
        let mut patches = Vec::with_capacity(cfg.visual_tokens() * cfg.patch_features());
        let mut patch_coords = Vec::with_capacity(cfg.visual_tokens());
        for (k, view) in scene.views.iter().enumerate() {
            if view.width() != cfg.image || view.height() != cfg.image {
                return Err(Error::Model(format!(
                    "view {k} is {}x{}, model expects {}x{}",
                    view.width(),
                    view.height(),
                    cfg.image,
                    cfg.image
                )));
            }
            for r in 0..grid.rows {
                for c in 0..grid.cols {
                    for ch in 0..CHANNELS {
                        for dy in 0..p {
                            for dx in 0..p {
                                patches.push(view.channel_at(ch, c * p + dx, r * p + dy));
                            }
                        }
                    }
                }
            }
            patch_coords.extend(patch_coordinates(&view.depth, &grid, k, &scene.rig)?);
        }
        let mut ego_features = scene.ego_status.features();
        // Velocities to tens of m/s.
        for i in [0, 1, 4, 5] {
            ego_features[i] /= 10.0;
        }
        let ego_history = scene.history_coordinates();
        if ego_history.len() != cfg.history + 1 {
            return Err(Error::Model(format!(
                "scene has {} history poses, model expects {}",
                ego_history.len(),
                cfg.history + 1
            )));
        }
        Ok(Self { patches, patch_coords, ego_features, ego_history })
    }
}

fn lit_tensor<T: Scalar>(shape: &[usize], values: impl IntoIterator<Item = f64>) -> Result<Tensor<T>> {
    Ok(Tensor::new(shape, values.into_iter().map(T::lit).collect())?)
}

/// `α·φ(c)` rows (BEV-zeroed per flag), or the learned encoder's output.
pub fn spatial_rows<T: Scalar>(b: &Bindings<T>, cfg: &ModelConfig, coords: &[Coordinate3D], bev: &[bool]) -> Result<Tensor<T>> {
    let alpha = cfg.alpha.tensor(b)?;
    let phi = match cfg.spatial_encoder {
        SpatialEncoder::Sinusoidal => {
            let pe = cfg.pe()?;
            let mut data = Vec::with_capacity(coords.len() * cfg.width);
            for (c, &flat) in coords.iter().zip(bev) {
                let enc = if flat { encode_bev(c.x, c.y, &pe)? } else { encode(*c, &pe)? };
                data.extend(enc.values);
            }
            lit_tensor(&[coords.len(), cfg.width], data)?
        }
        SpatialEncoder::LearnedMlp => {
            let input = coords.iter().zip(bev).flat_map(|(c, &flat)| {
                [c.x / LEARNED_PE_SCALE, c.y / LEARNED_PE_SCALE, if flat { 0.0 } else { c.z / LEARNED_PE_SCALE }]
            });
            let x = lit_tensor(&[coords.len(), 3], input)?;
            Mlp2::new(names::PENC, 3, cfg.width, cfg.width).forward(b, &x)?
        }
    };
    Ok(phi.mul(&alpha)?)
}

/// Patch embed, projector, then (when enabled) additive spatial encodings.
pub fn embed_views<T: Scalar>(b: &Bindings<T>, cfg: &ModelConfig, inputs: &SceneInputs) -> Result<Tensor<T>> {
    let n = cfg.visual_tokens();
    if inputs.patches.len() != n * cfg.patch_features() || inputs.patch_coords.len() != n {
        return Err(Error::Model(format!(
            "visual input holds {} features / {} coordinates, expected {} tokens of {}",
            inputs.patches.len(),
            inputs.patch_coords.len(),
            n,
            cfg.patch_features()
        )));
    }
    let layers = Layers::new(cfg, 0);
    let x = Tensor::new(&[n, cfg.patch_features()], inputs.patches.iter().map(|&v| T::lit(v as f64)).collect())?;
    let h = layers.proj.forward(b, &layers.patch.forward(b, &x)?)?;
    if cfg.inject_visual {
        let rows = spatial_rows(b, cfg, &inputs.patch_coords, &vec![false; n])?;
        Ok(h.add(&rows)?)
    } else {
        Ok(h)
    }
}

/// Which part of the sequence a stream fills.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamRole {
    Prompt,
    Target,
}

/// Rows for `elements` in order. Spatial slots in the target role are
/// generated-waypoint feedback.
pub(crate) fn embed_elements<T: Scalar>(
    b: &Bindings<T>,
    cfg: &ModelConfig,
    elements: &[StreamElement],
    inputs: &SceneInputs,
    role: StreamRole,
) -> Result<Tensor<T>> {
    let table = b.get(names::TOKENS)?;
    let ind = table.shape()[0] - 1;
    let mut text_ids = Vec::new();
    let mut text_pos = Vec::new();
    let mut coords = Vec::new();
    let mut bev = Vec::new();
    let mut coord_pos = Vec::new();
    let mut ego_pos = Vec::new();
    for (i, el) in elements.iter().enumerate() {
        match *el {
            StreamElement::Text(id) => {
                if id >= ind {
                    return Err(Error::Model(format!("token id {id} outside vocabulary of {ind}")));
                }
                text_ids.push(id);
                text_pos.push(i);
            }
            StreamElement::Indicator => {
                text_ids.push(ind);
                text_pos.push(i);
            }
            StreamElement::Spatial { coord, bev: flat } => {
                if !cfg.spatial() {
                    return Err(Error::Model("digit_text streams must not contain spatial slots".into()));
                }
                if role == StreamRole::Target && !cfg.feedback_pe {
                    text_ids.push(ind);
                    text_pos.push(i);
                } else {
                    coords.push(coord);
                    bev.push(flat);
                    coord_pos.push(i);
                }
            }
            StreamElement::EgoStatus => ego_pos.push(i),
        }
    }
    if ego_pos.len() > inputs.ego_history.len() + 1 {
        return Err(Error::Model(format!(
            "{} ego slots but only {} history frames",
            ego_pos.len(),
            inputs.ego_history.len()
        )));
    }

    let mut parts = Vec::new();
    let mut order = vec![0usize; elements.len()];
    let mut next = 0;
    let mut place = |positions: &[usize], next: &mut usize| {
        for &p in positions {
            order[p] = *next;
            *next += 1;
        }
    };
    if !text_ids.is_empty() {
        parts.push(table.embedding(&text_ids)?);
        place(&text_pos, &mut next);
    }
    if !coords.is_empty() {
        parts.push(spatial_rows(b, cfg, &coords, &bev)?);
        place(&coord_pos, &mut next);
    }
    if !ego_pos.is_empty() {
        let feats = lit_tensor(&[1, EgoStatusRecord::FEATURES], inputs.ego_features)?;
        parts.push(Linear::new(names::EGO, EgoStatusRecord::FEATURES, cfg.width).forward(b, &feats)?);
        let slots = ego_pos.len() - 1;
        if slots > 0 {
            let mut rows = b.get(names::EGO_SLOT)?.gather_rows(&(0..slots).collect::<Vec<_>>())?;
            if cfg.encode_ego {
                rows = rows.add(&spatial_rows(b, cfg, &inputs.ego_history[..slots], &vec![true; slots])?)?;
            }
            parts.push(rows);
        }
        place(&ego_pos, &mut next);
    }
    if parts.is_empty() {
        return Ok(Tensor::zeros(&[0, cfg.width]));
    }
    let stacked = if parts.len() == 1 { parts.pop().expect("one part") } else { Tensor::concat_rows(&parts)? };
    Ok(stacked.gather_rows(&order)?)
}

pub fn embed_stream<T: Scalar>(
    b: &Bindings<T>,
    cfg: &ModelConfig,
    stream: &TokenStream,
    inputs: &SceneInputs,
    role: StreamRole,
) -> Result<Tensor<T>> {
    embed_elements(b, cfg, stream.elements(), inputs, role)
}

pub struct ForwardOutput<T: Scalar> {
    /// `[L, |V'|]`.
    pub logits: Tensor<T>,
    /// Final-normalised hidden states `[L, width]`, the decoder's input.
    pub hidden: Tensor<T>,
}

/// Incremental decoding state: rotated keys and values per layer, `[len, width]`.
pub struct KvCache<T: Scalar> {
    keys: Vec<Option<Tensor<T>>>,
    values: Vec<Option<Tensor<T>>>,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(layers: usize) -> Self {
        Self { keys: vec![None; layers], values: vec![None; layers], len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn heads<T: Scalar>(x: &Tensor<T>, h: usize, d: usize) -> Result<Tensor<T>> {
    let l = x.shape()[0];
    Ok(x.reshape(&[l, h, d])?.swap_axes01()?)
}

fn merge_heads<T: Scalar>(x: &Tensor<T>, w: usize) -> Result<Tensor<T>> {
    let l = x.shape()[1];
    Ok(x.swap_axes01()?.reshape(&[l, w])?)
}

fn block<T: Scalar>(b: &Bindings<T>, cfg: &ModelConfig, i: usize, x: &Tensor<T>, cache: Option<&mut KvCache<T>>) -> Result<Tensor<T>> {
    let (w, h) = (cfg.width, cfg.heads);
    let d = w / h;
    let eps = T::lit(LN_EPS);
    let a = x.layer_norm(b.get(&names::blk(i, "ln1.g"))?, b.get(&names::blk(i, "ln1.b"))?, eps)?;
    let qkv = Layers::attn_qkv(i, w).forward(b, &a)?;
    let offset = cache.as_ref().map_or(0, |c| c.len);
    let q = heads(&qkv.slice_last(0, w)?, h, d)?.rotary_at(cfg.rope_base, offset)?;
    let k = heads(&qkv.slice_last(w, 2 * w)?, h, d)?.rotary_at(cfg.rope_base, offset)?;
    let v = heads(&qkv.slice_last(2 * w, 3 * w)?, h, d)?;
    let n = x.shape()[0];
    let (k, v) = match cache {
        None => (k, v),
        Some(cache) => {
            let (k_rows, v_rows) = (merge_heads(&k, w)?, merge_heads(&v, w)?);
            let k_all = match cache.keys[i].take() {
                Some(prev) => Tensor::concat_rows(&[prev, k_rows])?,
                None => k_rows,
            };
            let v_all = match cache.values[i].take() {
                Some(prev) => Tensor::concat_rows(&[prev, v_rows])?,
                None => v_rows,
            };
            cache.keys[i] = Some(k_all.clone());
            cache.values[i] = Some(v_all.clone());
            (heads(&k_all, h, d)?, heads(&v_all, h, d)?)
        }
    };
    let mut scores = q.matmul(&k.transpose_last2()?)?.mul_const(T::lit(1.0 / (d as f64).sqrt()));
    if offset == 0 {
        scores = scores.causal_mask()?;
    } else if n != 1 {
        return Err(Error::Model("incremental steps after the prefix take one row at a time".into()));
    }
    let o = merge_heads(&scores.softmax().matmul(&v)?, w)?;
    let x = x.add(&Layers::attn_out(i, w).forward(b, &o)?)?;
    let m = x.layer_norm(b.get(&names::blk(i, "ln2.g"))?, b.get(&names::blk(i, "ln2.b"))?, eps)?;
    Ok(x.add(&Layers::mlp(i, cfg).forward(b, &m)?)?)
}

fn run_layers<T: Scalar>(b: &Bindings<T>, cfg: &ModelConfig, x: Tensor<T>, mut cache: Option<&mut KvCache<T>>) -> Result<ForwardOutput<T>> {
    let n = x.shape()[0];
    let mut x = x;
    for i in 0..cfg.layers {
        x = block(b, cfg, i, &x, cache.as_deref_mut())?;
    }
    if let Some(c) = cache {
        c.len += n;
    }
    let hidden = x.layer_norm(b.get(names::FINAL_G)?, b.get(names::FINAL_B)?, T::lit(LN_EPS))?;
    let vocab = b.get("head.w")?.shape()[1];
    let logits = Linear::new(names::HEAD, cfg.width, vocab).forward(b, &hidden)?;
    Ok(ForwardOutput { logits, hidden })
}

/// Causal pass over `[visual ‖ textual]`.
pub fn forward<T: Scalar>(b: &Bindings<T>, cfg: &ModelConfig, visual: &Tensor<T>, textual: &Tensor<T>) -> Result<ForwardOutput<T>> {
    let total = visual.shape()[0] + textual.shape()[0];
    if total > cfg.max_seq {
        return Err(Error::Model(format!("sequence of {total} exceeds max_seq {}", cfg.max_seq)));
    }
    run_layers(b, cfg, Tensor::concat_rows(&[visual.clone(), textual.clone()])?, None)
}

/// Appends `rows` to a cached sequence; the first call may carry many rows.
pub fn forward_cached<T: Scalar>(b: &Bindings<T>, cfg: &ModelConfig, rows: &Tensor<T>, cache: &mut KvCache<T>) -> Result<ForwardOutput<T>> {
    if cache.len + rows.shape()[0] > cfg.max_seq {
        return Err(Error::Model(format!("sequence exceeds max_seq {}", cfg.max_seq)));
    }
    run_layers(b, cfg, rows.clone(), Some(cache))
}

/// Decoder output for a batch of hidden rows: `[n, 3]`, or `[n, 2H]` when task-specific.
pub fn decode_rows<T: Scalar>(b: &Bindings<T>, cfg: &ModelConfig, hidden: &Tensor<T>) -> Result<Tensor<T>> {
    if cfg.task_specific {
        let out = Mlp2::new(names::PSI_TRAJ, cfg.width, cfg.width, 2 * cfg.horizon).forward(b, hidden)?;
        Ok(out.mul_const(T::lit(DECODER_SCALE)))
    } else {
        PeDecoder::new(cfg.width, cfg.width).forward(b, hidden)
    }
}

/// Ego prefix, BOS, then the prompt; coordinates become spatial slots only
/// when prompt encodings are enabled.
pub fn prompt_stream(text: &str, vocab: &Vocab, cfg: &ModelConfig) -> Result<TokenStream> {
    let head = TokenStream::builder().ego(cfg.ego_slots())?.text(BOS).build();
    let body = if cfg.spatial() && cfg.encode_text_coords {
        encode_prompt(text, vocab)?
    } else {
        TokenStream::builder().texts(vocab.tokenize(text)).build()
    };
    head.concat(&body)
}

pub fn target_stream(waypoints: &[Coordinate3D], vocab: &Vocab, cfg: &ModelConfig) -> Result<TokenStream> {
    match (cfg.mode, cfg.task_specific) {
        (CoordMode::DigitText, _) => build_digit_target_stream(waypoints, cfg.horizon, vocab),
        (CoordMode::SpatialPe, false) => build_target_stream(waypoints, cfg.horizon, vocab),
        (CoordMode::SpatialPe, true) => {
            let last = waypoints
                .last()
                .filter(|_| waypoints.len() == cfg.horizon)
                .ok_or_else(|| Error::Tokens(format!("expected {} waypoints, got {}", cfg.horizon, waypoints.len())))?;
            Ok(TokenStream::builder()
                .texts(vocab.tokenize(TARGET_PREAMBLE))
                .coordinate(Coordinate3D::bev(last.x, last.y), true)
                .text(EOS)
                .build())
        }
    }
}

/// One teacher-forcing sample.
#[derive(Clone, Debug)]
pub struct Example {
    pub inputs: SceneInputs,
    pub prompt: TokenStream,
    pub target: TokenStream,
    pub waypoints: Vec<Coordinate3D>,
}

pub fn build_example(scene: &Scene, vocab: &Vocab, cfg: &ModelConfig) -> Result<Example> {
    let inputs = SceneInputs::from_scene(scene, cfg)?;
    let prompt = prompt_stream(&planning_prompt(scene), vocab, cfg)?;
    let target = target_stream(&scene.future, vocab, cfg)?;
    Ok(Example { inputs, prompt, target, waypoints: scene.future.clone() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Language,
    Decoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationResult {
    pub emitted: Vec<Emitted>,
    /// Ground-plane waypoints: decoded (spatial) or parsed from text (digits).
    pub waypoints: Vec<Coordinate3D>,
    pub heads: Vec<Head>,
    pub truncated: bool,
    pub text: String,
}

impl GenerationResult {
    pub fn indicator_count(&self, vocab: &Vocab) -> usize {
        self.emitted.iter().filter(|e| e.id == vocab.ind()).count()
    }
}

/// Model, vocabulary and weights.
#[derive(Clone, Debug)]
pub struct Planner {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParameterStore<f32>,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

impl Planner {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let params = init_params(&config, vocab.len(), seed)?;
        Ok(Self { config, vocab, params })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        checkpoint::save(&dir.join(PARAMS_FILE), &self.params)?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let cfg = dir.join(MODEL_CONFIG_FILE);
        std::fs::write(&cfg, serde_json::to_string_pretty(&self.config)?).at(&cfg)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(MODEL_CONFIG_FILE);
        let config: ModelConfig = serde_json::from_str(&std::fs::read_to_string(&cfg_path).at(&cfg_path)?)?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        let params = checkpoint::load(&dir.join(PARAMS_FILE))?;
        let expected = init_params(&config, vocab.len(), 0)?;
        for (name, p) in expected.iter() {
            let got = params.get(name).ok_or_else(|| Error::Model(format!("checkpoint lacks parameter `{name}`")))?;
            if got.shape != p.shape {
                return Err(Error::Model(format!("parameter `{name}` has shape {:?}, expected {:?}", got.shape, p.shape)));
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Model(format!("checkpoint has {} parameters, model expects {}", params.len(), expected.len())));
        }
        Ok(Self { config, vocab, params })
    }

    /// Greedy decoding with indicator routing.
    pub fn generate(&self, inputs: &SceneInputs, prompt: &TokenStream, max_steps: usize) -> Result<GenerationResult> {
        let cfg = &self.config;
        let b = self.params.bind_frozen();
        let ind = self.vocab.ind();
        let mut cache = KvCache::new(cfg.layers);
        let visual = embed_views(&b, cfg, inputs)?;
        let prefix = Tensor::concat_rows(&[visual, embed_stream(&b, cfg, prompt, inputs, StreamRole::Prompt)?])?;
        let mut out = forward_cached(&b, cfg, &prefix, &mut cache)?;

        let mut emitted = Vec::new();
        let mut waypoints = Vec::new();
        let mut heads = Vec::new();
        let mut awaiting_coordinate = false;
        let mut finished = false;
        for _ in 0..max_steps {
            let last = out.hidden.shape()[0] - 1;
            let element = if awaiting_coordinate {
                awaiting_coordinate = false;
                heads.push(Head::Decoder);
                let decoded = decode_rows(&b, cfg, &out.hidden.slice_rows(last, last + 1)?)?.to_vec();
                let pts: Vec<Coordinate3D> = decoded
                    .chunks(if cfg.task_specific { 2 } else { 3 })
                    .map(|c| Coordinate3D::bev(c[0].as_f64(), c[1].as_f64()))
                    .collect();
                let fed = *pts.last().expect("decoder emits at least one point");
                waypoints.extend(&pts);
                if let Some(e) = emitted.last_mut() {
                    let e: &mut Emitted = e;
                    e.coord = Some(fed);
                }
                StreamElement::Spatial { coord: fed, bev: true }
            } else {
                heads.push(Head::Language);
                let v = out.logits.shape()[1];
                let id = argmax(&out.logits.data()[last * v..(last + 1) * v]);
                emitted.push(Emitted { id, coord: None });
                if id == EOS {
                    finished = true;
                    break;
                }
                if id == ind {
                    awaiting_coordinate = cfg.spatial();
                    StreamElement::Indicator
                } else {
                    StreamElement::Text(id)
                }
            };
            let row = if element == StreamElement::Indicator {
                b.get(names::TOKENS)?.gather_rows(&[ind])?
            } else {
                embed_elements(&b, cfg, &[element], inputs, StreamRole::Target)?
            };
            if cache.len() + 1 > cfg.max_seq {
                break;
            }
            out = forward_cached(&b, cfg, &row, &mut cache)?;
        }
        let rendered = render_output(&emitted, &self.vocab);
        if !cfg.spatial() {
            waypoints = scan_coordinates(&rendered.text)
                .into_iter()
                .filter(|s| s.bev)
                .map(|s| Coordinate3D::bev(s.coord.x, s.coord.y))
                .collect();
        }
        Ok(GenerationResult { emitted, waypoints, heads, truncated: !finished, text: rendered.text })
    }

    /// Whether the output follows the target grammar: preamble, `H` coordinates, EOS.
    pub fn grammar_valid(&self, result: &GenerationResult) -> bool {
        if result.truncated {
            return false;
        }
        let cfg = &self.config;
        let ids: Vec<usize> = result.emitted.iter().map(|e| e.id).collect();
        let mut expected = self.vocab.tokenize(TARGET_PREAMBLE);
        if cfg.spatial() {
            let inds = if cfg.task_specific { 1 } else { cfg.horizon };
            expected.extend(std::iter::repeat(self.vocab.ind()).take(inds));
            expected.push(EOS);
            ids == expected && result.waypoints.len() == cfg.horizon
        } else {
            // Text must be exactly the preamble followed by H coordinates.
            let spans = scan_coordinates(&result.text);
            let mut rebuilt = String::from(TARGET_PREAMBLE);
            for s in &spans {
                rebuilt.push(' ');
                rebuilt.push_str(&result.text[s.start..s.end]);
            }
            ids.last() == Some(&EOS) && spans.len() == cfg.horizon && spans.iter().all(|s| s.bev) && rebuilt == result.text
        }
    }
}
