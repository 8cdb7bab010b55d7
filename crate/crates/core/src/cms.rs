//! Context-gated modality shifting inside transformer self-attention.
//!
//! For every (word i, nonverbal frame j) pair a sigmoid gate decides how
//! much of frame j's (projected) feature vector flows into word i. The
//! gated contributions from both nonverbal streams are averaged over all
//! valid frames into one shift vector per word, and that shift is added
//! to the query, key, and value paths of scaled dot-product attention.
//! Each encoder layer recomputes its own gates and shifts from its own
//! hidden states.
//!
//! With the shift forced to zero the layer collapses to a plain
//! transformer encoder layer, and with a shift that is constant across
//! frames it collapses to single-step word shifting; both reductions are
//! checked by tests and by [`mag_reduction_check`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamRegistry, PassBindings};
use crate::reference;
use crate::tape::{Tape, TensorId};

/// Encoder geometry. `model_width` must be divisible by `num_heads`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CmsEncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_width: usize,
    pub max_seq_len: usize,
}

impl CmsEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_width == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.model_width % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "head count {} does not divide model width {}",
                self.num_heads, self.model_width
            )));
        }
        Ok(())
    }
}

/// Where the shift mechanism is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmsMode {
    /// Shifts recomputed in every encoder layer.
    AllLayers,
    /// Shift only in the given layer; all other layers run plain attention.
    SingleLayer(usize),
    /// Plain transformer encoder.
    Off,
}

impl CmsMode {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if let CmsMode::SingleLayer(k) = self {
            if *k >= num_layers {
                return Err(Error::Config(format!(
                    "single-layer shift index {k} out of range for {num_layers} layers"
                )));
            }
        }
        Ok(())
    }

    pub fn active_in(&self, layer: usize) -> bool {
        match self {
            CmsMode::AllLayers => true,
            CmsMode::SingleLayer(k) => *k == layer,
            CmsMode::Off => false,
        }
    }
}

/// Gate parameters for one nonverbal stream: the text-side and
/// stream-side halves of the pair weight vector plus a scalar bias.
#[derive(Debug, Clone, Copy)]
pub struct GateParams {
    pub w_text: ParamId,
    pub w_stream: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub w_output: ParamId,
}

/// All trainable parameters of one encoder layer.
#[derive(Debug, Clone)]
pub struct CmsLayerParams {
    pub gate_visual: GateParams,
    pub gate_acoustic: GateParams,
    pub w_shift_visual: ParamId,
    pub w_shift_acoustic: ParamId,
    pub attention: AttentionParams,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln_attn_gain: ParamId,
    pub ln_attn_bias: ParamId,
    pub ln_ffn_gain: ParamId,
    pub ln_ffn_bias: ParamId,
}

impl CmsLayerParams {
    pub fn init<R: Rng>(reg: &mut ParamRegistry, rng: &mut R, d: usize, prefix: &str) -> Self {
        let hidden = 4 * d;
        let gate = |reg: &mut ParamRegistry, rng: &mut R, stream: &str| GateParams {
            w_text: reg.matrix(format!("{prefix}.gate_{stream}.w_text"), d, 1, rng),
            w_stream: reg.matrix(format!("{prefix}.gate_{stream}.w_stream"), d, 1, rng),
            bias: reg.zeros(format!("{prefix}.gate_{stream}.bias"), &[1, 1]),
        };
        CmsLayerParams {
            gate_visual: gate(reg, rng, "visual"),
            gate_acoustic: gate(reg, rng, "acoustic"),
            w_shift_visual: reg.matrix(format!("{prefix}.w_shift_visual"), d, d, rng),
            w_shift_acoustic: reg.matrix(format!("{prefix}.w_shift_acoustic"), d, d, rng),
            attention: AttentionParams {
                w_query: reg.matrix(format!("{prefix}.attn.w_query"), d, d, rng),
                w_key: reg.matrix(format!("{prefix}.attn.w_key"), d, d, rng),
                w_value: reg.matrix(format!("{prefix}.attn.w_value"), d, d, rng),
                w_output: reg.matrix(format!("{prefix}.attn.w_output"), d, d, rng),
            },
            ffn_w1: reg.matrix(format!("{prefix}.ffn.w1"), d, hidden, rng),
            ffn_b1: reg.zeros(format!("{prefix}.ffn.b1"), &[hidden]),
            ffn_w2: reg.matrix(format!("{prefix}.ffn.w2"), hidden, d, rng),
            ffn_b2: reg.zeros(format!("{prefix}.ffn.b2"), &[d]),
            ln_attn_gain: reg.ones(format!("{prefix}.ln_attn.gain"), &[d]),
            ln_attn_bias: reg.zeros(format!("{prefix}.ln_attn.bias"), &[d]),
            ln_ffn_gain: reg.ones(format!("{prefix}.ln_ffn.gain"), &[d]),
            ln_ffn_bias: reg.zeros(format!("{prefix}.ln_ffn.bias"), &[d]),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.gate_visual.w_text,
            self.gate_visual.w_stream,
            self.gate_visual.bias,
            self.gate_acoustic.w_text,
            self.gate_acoustic.w_stream,
            self.gate_acoustic.bias,
            self.w_shift_visual,
            self.w_shift_acoustic,
            self.attention.w_query,
            self.attention.w_key,
            self.attention.w_value,
            self.attention.w_output,
            self.ffn_w1,
            self.ffn_b1,
            self.ffn_w2,
            self.ffn_b2,
            self.ln_attn_gain,
            self.ln_attn_bias,
            self.ln_ffn_gain,
            self.ln_ffn_bias,
        ]
    }
}

/// Tape-bound gate weights.
#[derive(Debug, Clone, Copy)]
pub struct BoundGates {
    pub w_text: TensorId,
    pub w_stream: TensorId,
    pub bias: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAttention {
    pub w_query: TensorId,
    pub w_key: TensorId,
    pub w_value: TensorId,
    pub w_output: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub gate_visual: BoundGates,
    pub gate_acoustic: BoundGates,
    pub w_shift_visual: TensorId,
    pub w_shift_acoustic: TensorId,
    pub attention: BoundAttention,
    pub ffn_w1: TensorId,
    pub ffn_b1: TensorId,
    pub ffn_w2: TensorId,
    pub ffn_b2: TensorId,
    pub ln_attn_gain: TensorId,
    pub ln_attn_bias: TensorId,
    pub ln_ffn_gain: TensorId,
    pub ln_ffn_bias: TensorId,
}

impl CmsLayerParams {
    pub fn bind(&self, tape: &mut Tape, reg: &ParamRegistry, b: &mut PassBindings) -> Result<BoundLayer> {
        let mut gates = |tape: &mut Tape, b: &mut PassBindings, g: &GateParams| -> Result<BoundGates> {
            Ok(BoundGates {
                w_text: b.bind(tape, reg, g.w_text)?,
                w_stream: b.bind(tape, reg, g.w_stream)?,
                bias: b.bind(tape, reg, g.bias)?,
            })
        };
        Ok(BoundLayer {
            gate_visual: gates(tape, b, &self.gate_visual)?,
            gate_acoustic: gates(tape, b, &self.gate_acoustic)?,
            w_shift_visual: b.bind(tape, reg, self.w_shift_visual)?,
            w_shift_acoustic: b.bind(tape, reg, self.w_shift_acoustic)?,
            attention: BoundAttention {
                w_query: b.bind(tape, reg, self.attention.w_query)?,
                w_key: b.bind(tape, reg, self.attention.w_key)?,
                w_value: b.bind(tape, reg, self.attention.w_value)?,
                w_output: b.bind(tape, reg, self.attention.w_output)?,
            },
            ffn_w1: b.bind(tape, reg, self.ffn_w1)?,
            ffn_b1: b.bind(tape, reg, self.ffn_b1)?,
            ffn_w2: b.bind(tape, reg, self.ffn_w2)?,
            ffn_b2: b.bind(tape, reg, self.ffn_b2)?,
            ln_attn_gain: b.bind(tape, reg, self.ln_attn_gain)?,
            ln_attn_bias: b.bind(tape, reg, self.ln_attn_bias)?,
            ln_ffn_gain: b.bind(tape, reg, self.ln_ffn_gain)?,
            ln_ffn_bias: b.bind(tape, reg, self.ln_ffn_bias)?,
        })
    }
}

/// One width-d nonverbal stream for a single sample, already projected,
/// with its frame validity mask.
#[derive(Debug, Clone)]
pub struct StreamInput {
    pub frames: TensorId,
    pub mask: Vec<f64>,
}

/// Pairwise gates `g[i][j] = sigmoid(w_text . x_i + w_stream . y_j + bias)`
/// for text `x: [N×d]` against a nonverbal stream `y: [M×d]`.
pub fn cms_gates(tape: &mut Tape, x: TensorId, stream: TensorId, g: &BoundGates) -> Result<TensorId> {
    let dx = tape.shape_of(x).get(1).copied().unwrap_or(0);
    let dy = tape.shape_of(stream).get(1).copied().unwrap_or(0);
    if dx != dy {
        return Err(Error::ShapeMismatch {
            op: "cms_gates",
            lhs: tape.shape_of(x).to_vec(),
            rhs: tape.shape_of(stream).to_vec(),
        });
    }
    let text_part = tape.matmul(x, g.w_text)?;
    let stream_part = tape.matmul(stream, g.w_stream)?;
    let stream_row = tape.transpose(stream_part)?;
    let grid = tape.add(text_part, stream_row)?;
    let biased = tape.add(grid, g.bias)?;
    tape.sigmoid(biased)
}

/// Count of frame indices valid in at least one stream. Frame index j
/// runs over the union of both streams' positions.
pub fn union_valid_count(mask_v: &[f64], mask_a: &[f64]) -> usize {
    let m = mask_v.len().max(mask_a.len());
    (0..m)
        .filter(|&j| {
            mask_v.get(j).copied().unwrap_or(0.0) == 1.0 || mask_a.get(j).copied().unwrap_or(0.0) == 1.0
        })
        .count()
}

/// Per-word shift vectors `[N×d]`: gated frame contributions from both
/// streams, averaged over the union of valid frame indices.
pub fn cms_shift(
    tape: &mut Tape,
    gates_visual: TensorId,
    gates_acoustic: TensorId,
    visual: &StreamInput,
    acoustic: &StreamInput,
    w_shift_visual: TensorId,
    w_shift_acoustic: TensorId,
) -> Result<TensorId> {
    for (name, s) in [("visual", visual), ("acoustic", acoustic)] {
        if s.mask.iter().all(|&m| m == 0.0) {
            return Err(Error::Degenerate(format!("{name} stream is entirely masked")));
        }
    }
    let count = union_valid_count(&visual.mask, &acoustic.mask);

    let mut gated_sum = |gates: TensorId, s: &StreamInput, w: TensorId| -> Result<TensorId> {
        let projected = tape.matmul(s.frames, w)?;
        let mask_row = tape.constant(s.mask.clone(), &[1, s.mask.len()])?;
        let masked_gates = tape.mul(gates, mask_row)?;
        tape.matmul(masked_gates, projected)
    };
    let from_visual = gated_sum(gates_visual, visual, w_shift_visual)?;
    let from_acoustic = gated_sum(gates_acoustic, acoustic, w_shift_acoustic)?;
    let total = tape.add(from_visual, from_acoustic)?;
    tape.scale(total, 1.0 / count as f64)
}

/// Multi-head scaled dot-product self-attention over `x: [N×d]`, with an
/// optional per-word shift added to the query, key, and value paths at
/// full width before the head split. Masked keys get -inf logits.
pub fn cms_self_attention(
    tape: &mut Tape,
    x: TensorId,
    shift: Option<TensorId>,
    key_mask: &[f64],
    attn: &BoundAttention,
    heads: usize,
) -> Result<TensorId> {
    let shape = tape.shape_of(x).to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch { op: "cms_self_attention", lhs: shape, rhs: vec![] });
    }
    let (n, d) = (shape[0], shape[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("head count {heads} does not divide width {d}")));
    }
    if key_mask.len() != n {
        return Err(Error::ShapeMismatch { op: "cms_self_attention", lhs: vec![n], rhs: vec![key_mask.len()] });
    }

    let mut project = |w: TensorId| -> Result<TensorId> {
        let p = tape.matmul(x, w)?;
        match shift {
            Some(a) => tape.add(p, a),
            None => Ok(p),
        }
    };
    let q = project(attn.w_query)?;
    let k = project(attn.w_key)?;
    let v = project(attn.w_value)?;

    let mask_bias: Vec<f64> = key_mask
        .iter()
        .map(|&m| if m == 1.0 { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    let mask_row = tape.constant(mask_bias, &[1, n])?;

    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale)?;
        let masked = tape.add(scaled, mask_row)?;
        let alpha = tape.softmax(masked, 1)?;
        head_outputs.push(tape.matmul(alpha, vh)?);
    }
    let merged = if heads == 1 { head_outputs[0] } else { tape.concat(&head_outputs, 1)? };
    tape.matmul(merged, attn.w_output)
}

/// One full encoder layer: (shifted) attention, residual + layer norm,
/// feed-forward, residual + layer norm.
pub fn encoder_layer_forward(
    tape: &mut Tape,
    x: TensorId,
    shift: Option<TensorId>,
    key_mask: &[f64],
    layer: &BoundLayer,
    heads: usize,
) -> Result<TensorId> {
    let attn_out = cms_self_attention(tape, x, shift, key_mask, &layer.attention, heads)?;
    let res1 = tape.add(x, attn_out)?;
    let normed1 = tape.layer_norm(res1, layer.ln_attn_gain, layer.ln_attn_bias)?;
    let h = tape.matmul(normed1, layer.ffn_w1)?;
    let h = tape.add(h, layer.ffn_b1)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, layer.ffn_w2)?;
    let h = tape.add(h, layer.ffn_b2)?;
    let res2 = tape.add(normed1, h)?;
    tape.layer_norm(res2, layer.ln_ffn_gain, layer.ln_ffn_bias)
}

/// Gate-weighted shift magnitude map for one sample and one layer:
/// `values[i*cols + j] = ||a_ij||_2` over the union frame index range.
#[derive(Debug, Clone)]
pub struct ShiftMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ShiftMap {
    fn zeros(rows: usize, cols: usize) -> Self {
        ShiftMap { rows, cols, values: vec![0.0; rows * cols] }
    }
}

fn shift_map_from_values(
    tape: &Tape,
    gates_visual: TensorId,
    gates_acoustic: TensorId,
    visual: &StreamInput,
    acoustic: &StreamInput,
    w_shift_visual: TensorId,
    w_shift_acoustic: TensorId,
    n: usize,
    d: usize,
) -> ShiftMap {
    let m_v = visual.mask.len();
    let m_a = acoustic.mask.len();
    let cols = m_v.max(m_a);
    let pv = reference::matmul_loop(tape.value(visual.frames), tape.value(w_shift_visual), m_v, d, d);
    let pa = reference::matmul_loop(tape.value(acoustic.frames), tape.value(w_shift_acoustic), m_a, d, d);
    let gv = tape.value(gates_visual);
    let ga = tape.value(gates_acoustic);
    let mut map = ShiftMap::zeros(n, cols);
    for i in 0..n {
        for j in 0..cols {
            let mut sq = 0.0;
            for t in 0..d {
                let mut v = 0.0;
                if j < m_v && visual.mask[j] == 1.0 {
                    v += gv[i * m_v + j] * pv[j * d + t];
                }
                if j < m_a && acoustic.mask[j] == 1.0 {
                    v += ga[i * m_a + j] * pa[j * d + t];
                }
                sq += v * v;
            }
            map.values[i * cols + j] = sq.sqrt();
        }
    }
    map
}

/// Stacked encoder forward for one sample. `x0` is the embedded token
/// sequence; each layer recomputes gates and shifts from its own current
/// hidden states when the mode makes it active. When `map_layer` is set,
/// the returned [`ShiftMap`] holds that layer's gate-weighted shift
/// magnitudes (zeros if the shift is inactive there).
pub fn cms_encoder_forward(
    tape: &mut Tape,
    x0: TensorId,
    key_mask: &[f64],
    visual: &StreamInput,
    acoustic: &StreamInput,
    layers: &[BoundLayer],
    config: &CmsEncoderConfig,
    mode: CmsMode,
    map_layer: Option<usize>,
) -> Result<(TensorId, Option<ShiftMap>)> {
    config.validate()?;
    mode.validate(layers.len())?;
    if let Some(k) = map_layer {
        if k >= layers.len() {
            return Err(Error::Config(format!("map layer {k} out of range for {} layers", layers.len())));
        }
    }
    let n = tape.shape_of(x0)[0];
    let d = config.model_width;
    let mut x = x0;
    let mut captured = None;
    for (idx, layer) in layers.iter().enumerate() {
        let shift = if mode.active_in(idx) {
            let gates_v = cms_gates(tape, x, visual.frames, &layer.gate_visual)?;
            let gates_a = cms_gates(tape, x, acoustic.frames, &layer.gate_acoustic)?;
            if map_layer == Some(idx) {
                captured = Some(shift_map_from_values(
                    tape,
                    gates_v,
                    gates_a,
                    visual,
                    acoustic,
                    layer.w_shift_visual,
                    layer.w_shift_acoustic,
                    n,
                    d,
                ));
            }
            Some(cms_shift(
                tape,
                gates_v,
                gates_a,
                visual,
                acoustic,
                layer.w_shift_visual,
                layer.w_shift_acoustic,
            )?)
        } else {
            if map_layer == Some(idx) {
                captured = Some(ShiftMap::zeros(n, visual.mask.len().max(acoustic.mask.len())));
            }
            None
        };
        x = encoder_layer_forward(tape, x, shift, key_mask, layer, config.num_heads)?;
    }
    Ok((x, captured))
}

/// A self-contained random instance for the single-step reduction check.
#[derive(Debug, Clone)]
pub struct MagCheckInstance {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub heads: usize,
    pub x: Vec<f64>,
    pub shift: Vec<f64>,
    pub w_query: Vec<f64>,
    pub w_key: Vec<f64>,
    pub w_value: Vec<f64>,
    pub w_output: Vec<f64>,
}

impl MagCheckInstance {
    pub fn random(seed: u64, n: usize, m: usize, d: usize, heads: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |len: usize| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        MagCheckInstance {
            n,
            m,
            d,
            heads,
            x: draw(n * d),
            shift: draw(n * d),
            w_query: draw(d * d),
            w_key: draw(d * d),
            w_value: draw(d * d),
            w_output: draw(d * d),
        }
    }

    pub fn zero_shift(mut self) -> Self {
        self.shift = vec![0.0; self.n * self.d];
        self
    }
}

/// Verifies the reduction to single-step word shifting.
///
/// A per-pair shift that is constant across frames (`a_ij = shift_i` for
/// every j) is pushed through the frame-averaging step, and the shifted
/// attention output is compared against an independent loop
/// implementation that adds `shift_i` before plain attention. Returns
/// the max abs deviation across the averaged shift and the output.
pub fn mag_reduction_check(inst: &MagCheckInstance) -> Result<f64> {
    let MagCheckInstance { n, m, d, heads, .. } = *inst;
    let mut tape = Tape::new();
    let x = tape.constant(inst.x.clone(), &[n, d])?;

    // Average the constant-in-j per-pair shifts the same way cms_shift
    // does: mask-weighted row mean over m frame slots.
    let ones = vec![1.0; m];
    let mut averaged_rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut stacked = Vec::with_capacity(m * d);
        for _ in 0..m {
            stacked.extend_from_slice(&inst.shift[i * d..(i + 1) * d]);
        }
        let rows = tape.constant(stacked, &[m, d])?;
        let mask = tape.constant(ones.clone(), &[m])?;
        averaged_rows.push(tape.masked_mean_rows(rows, mask)?);
    }
    let averaged = tape.concat(&averaged_rows, 0)?;
    let mut dev = 0.0f64;
    for (got, want) in tape.value(averaged).iter().zip(&inst.shift) {
        dev = dev.max((got - want).abs());
    }

    let attn = BoundAttention {
        w_query: tape.constant(inst.w_query.clone(), &[d, d])?,
        w_key: tape.constant(inst.w_key.clone(), &[d, d])?,
        w_value: tape.constant(inst.w_value.clone(), &[d, d])?,
        w_output: tape.constant(inst.w_output.clone(), &[d, d])?,
    };
    let key_mask = vec![1.0; n];
    let out = cms_self_attention(&mut tape, x, Some(averaged), &key_mask, &attn, heads)?;

    let expected = reference::shifted_attention_loop(
        &inst.x,
        &inst.shift,
        n,
        d,
        heads,
        &inst.w_query,
        &inst.w_key,
        &inst.w_value,
        &inst.w_output,
        &key_mask,
    );
    for (got, want) in tape.value(out).iter().zip(&expected) {
        dev = dev.max((got - want).abs());
    }
    Ok(dev)
}
