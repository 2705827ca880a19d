//! The implicit field MLP, the orientation/channel conditioning, the
//! temporal correlation stack and rendering of complete responses.
//!
//! The field has four hidden layers of `field_width` units and a scalar
//! head. Layer 3 also receives the raw query through a skip connection.
//! Every layer (the head included) gets `E_o[theta] A_k + E_c[c] B_k` added
//! to its input, where `A_k`, `B_k` project the `h`-wide embeddings to that
//! layer's input width.
//!
//! The temporal stack is three dilated (2) 1-D convolutions with kernel
//! sizes 3, 5, 7 in cross-correlation convention. Layers 1 and 2 are
//! followed by a leaky ReLU (slope 0.2); layer 3 is linear. The hidden
//! layers carry `conv_channels` channels so that the initial state can be an
//! exact identity on signed signals: channels hold `(x, -x)` and
//! `lrelu(lrelu(x)) - lrelu(lrelu(-x)) = (1 + a^2) x`.

use rand_chacha::ChaCha8Rng;

use crate::context::{condition_on, encode_contexts, time_vector, ItemFeatures};
use crate::dsp::Rir;
use crate::error::Result;
use crate::matrix::Matrix;
use crate::model::{gaussian, kaiming_uniform, Model, ModelConfig};
use crate::params::ParamSet;
use crate::room::{BoundaryContext, Orientation, Query};
use crate::tape::{conv1d_forward, leaky_relu, relu, Tape, Var};

pub const CONV_PREFIX: &str = "conv.";
pub const CONV_KERNELS: [usize; 3] = [3, 5, 7];
pub const CONV_DILATION: usize = 2;
pub const LEAKY_SLOPE: f64 = 0.2;
/// Input samples seen by one output sample of the temporal stack.
pub const RECEPTIVE_FIELD: usize = 1 + 2 * (2 + 4 + 6);

const LAYERS: [&str; 5] = ["l1", "l2", "l3", "l4", "head"];

fn layer_input_width(cfg: &ModelConfig, layer: usize) -> usize {
    match layer {
        0 => cfg.query_width(),
        2 => cfg.field_width + cfg.query_width(),
        _ => cfg.field_width,
    }
}

pub(crate) fn add_params(cfg: &ModelConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) {
    let h = cfg.context_dim;
    for (k, name) in LAYERS.iter().enumerate() {
        let fan_in = layer_input_width(cfg, k);
        let out = if k == 4 { 1 } else { cfg.field_width };
        params.add(format!("field.{name}.w"), kaiming_uniform(fan_in, out, rng));
        params.add(format!("field.{name}.b"), Matrix::zeros(1, out));
        params.add(format!("field.{name}.cond_orientation"), kaiming_uniform(h, fan_in, rng));
        params.add(format!("field.{name}.cond_channel"), kaiming_uniform(h, fan_in, rng));
    }
    params.add("emb.orientation", gaussian(4, h, 0.1, rng));
    params.add("emb.channel", gaussian(2, h, 0.1, rng));

    for (layer, w) in identity_conv_weights(cfg.conv_channels).into_iter().enumerate() {
        let mut w = w;
        let noise = gaussian(w.rows, w.cols, cfg.conv_init_noise, rng);
        w.add_assign(&noise);
        params.add(format!("{CONV_PREFIX}{}.w", layer + 1), w);
        params.add(format!("{CONV_PREFIX}{}.b", layer + 1), Matrix::zeros(if layer == 2 { 2 } else { cfg.conv_channels }, 1));
    }
}

/// Conv weights that make the stack an exact identity map (up to rounding).
pub fn identity_conv_weights(channels: usize) -> [Matrix; 3] {
    let tap = |w: &mut Matrix, o: usize, i: usize, c_in: usize, k: usize, v: f64| {
        w.data[o * c_in * k + i * k + k / 2] = v;
    };
    let [k1, k2, k3] = CONV_KERNELS;
    let mut w1 = Matrix::zeros(channels, 2 * k1);
    for c in 0..2 {
        tap(&mut w1, c, c, 2, k1, 1.0);
        tap(&mut w1, 2 + c, c, 2, k1, -1.0);
    }
    let mut w2 = Matrix::zeros(channels, channels * k2);
    for c in 0..channels {
        tap(&mut w2, c, c, channels, k2, 1.0);
    }
    let gain = 1.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE);
    let mut w3 = Matrix::zeros(2, channels * k3);
    for c in 0..2 {
        tap(&mut w3, c, c, channels, k3, gain);
        tap(&mut w3, c, 2 + c, channels, k3, -gain);
    }
    [w1, w2, w3]
}

/// Overwrites the temporal stack with the exact identity initialisation.
pub fn set_identity_conv(model: &mut Model) {
    for (layer, w) in identity_conv_weights(model.config.conv_channels).into_iter().enumerate() {
        *model.params.by_name_mut(&format!("{CONV_PREFIX}{}.w", layer + 1)) = w;
        model
            .params
            .by_name_mut(&format!("{CONV_PREFIX}{}.b", layer + 1))
            .data
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
}

/// Both channels of the field for every row of `tvec` (`T x h`), given the
/// point-major context matrix `cmat` (`6N x h`). Returns `2 x T`.
///
/// The spatial-temporal query `q_t = C t_vec` only ever enters the network
/// through `q_t W1` and `q_t W3_skip`, so both are computed as
/// `t_vec (C^T W)`: the `T`-long products shrink from `6N` to `h` inputs and
/// are shared by the two channels. The orientation and channel terms are
/// folded into per-layer bias rows: `(x + e) W + b = x W + (e W + b)`.
pub(crate) fn field_graph(cfg: &ModelConfig, tape: &mut Tape, tvec: Var, cmat: Var, orientation: Orientation) -> Var {
    let width = cfg.field_width;
    let ct = tape.transpose(cmat);
    let w1 = tape.param_named("field.l1.w");
    let m1 = tape.matmul(ct, w1);
    let z1 = tape.matmul(tvec, m1);
    let w3 = tape.param_named("field.l3.w");
    let w3_hidden = tape.slice_rows(w3, 0, width);
    let w3_skip = tape.slice_rows(w3, width, width + cfg.query_width());
    let m3 = tape.matmul(ct, w3_skip);
    let z3 = tape.matmul(tvec, m3);

    let emb_o = tape.param_named("emb.orientation");
    let emb_c = tape.param_named("emb.channel");
    let theta = tape.gather_rows(emb_o, &[orientation.index()]);
    let mut channels = Vec::with_capacity(2);
    for channel in 0..2 {
        let chan = tape.gather_rows(emb_c, &[channel]);
        let biases: Vec<Var> = LAYERS
            .iter()
            .map(|name| {
                let a = tape.param_named(&format!("field.{name}.cond_orientation"));
                let b = tape.param_named(&format!("field.{name}.cond_channel"));
                let ca = tape.matmul(theta, a);
                let cb = tape.matmul(chan, b);
                let cond = tape.add(ca, cb);
                let w = tape.param_named(&format!("field.{name}.w"));
                let folded = tape.matmul(cond, w);
                let bias = tape.param_named(&format!("field.{name}.b"));
                tape.add(folded, bias)
            })
            .collect();
        let h1 = tape.add_row(z1, biases[0]);
        let h1 = tape.relu(h1);
        let w2 = tape.param_named("field.l2.w");
        let h2 = tape.dense(h1, w2, biases[1], None, true);
        let h3 = tape.dense(h2, w3_hidden, biases[2], Some(z3), true);
        let w4 = tape.param_named("field.l4.w");
        let h4 = tape.dense(h3, w4, biases[3], None, true);
        let wh = tape.param_named("field.head.w");
        channels.push(tape.dense(h4, wh, biases[4], None, false));
    }
    let both = tape.concat_cols(channels[0], channels[1]);
    tape.transpose(both)
}

/// Temporal correlation stack on a `2 x T` node.
pub(crate) fn temporal_graph(cfg: &ModelConfig, tape: &mut Tape, signal: Var) -> Var {
    let _ = cfg;
    let mut x = signal;
    for (layer, &k) in CONV_KERNELS.iter().enumerate() {
        let w = tape.param_named(&format!("{CONV_PREFIX}{}.w", layer + 1));
        let b = tape.param_named(&format!("{CONV_PREFIX}{}.b", layer + 1));
        x = tape.conv1d(x, w, b, k, CONV_DILATION);
        if layer < 2 {
            x = tape.leaky_relu(x, LEAKY_SLOPE);
        }
    }
    x
}

/// One field evaluation, written out layer by layer.
pub fn field_forward(query: &[f64], orientation: Orientation, channel: usize, model: &Model) -> f64 {
    let p = &model.params;
    let theta = p.by_name("emb.orientation").row(orientation.index());
    let chan = p.by_name("emb.channel").row(channel);
    let mut x: Vec<f64> = query.to_vec();
    for (k, name) in LAYERS.iter().enumerate() {
        let a = p.by_name(&format!("field.{name}.cond_orientation"));
        let b = p.by_name(&format!("field.{name}.cond_channel"));
        let mut input = x.clone();
        if k == 2 {
            input.extend_from_slice(query);
        }
        for (j, v) in input.iter_mut().enumerate() {
            let mut ca = 0.0;
            for (r, t) in theta.iter().enumerate() {
                ca += t * a.data[r * a.cols + j];
            }
            let mut cb = 0.0;
            for (r, c) in chan.iter().enumerate() {
                cb += c * b.data[r * b.cols + j];
            }
            *v += ca + cb;
        }
        let w = p.by_name(&format!("field.{name}.w"));
        let bias = p.by_name(&format!("field.{name}.b"));
        x = (0..w.cols)
            .map(|j| {
                let mut acc = 0.0;
                for (i, v) in input.iter().enumerate() {
                    acc += v * w.data[i * w.cols + j];
                }
                acc + bias.data[j]
            })
            .collect();
        if k < 4 {
            x.iter_mut().for_each(|v| *v = relu(*v));
        }
    }
    x[0]
}

/// Applies the temporal correlation stack to a response.
pub fn temporal_refine(rir: &Rir, model: &Model) -> Rir {
    let p = &model.params;
    let mut x = Matrix::from_vec(2, rir.len(), [rir.channel(0), rir.channel(1)].concat());
    for (layer, &k) in CONV_KERNELS.iter().enumerate() {
        let w = p.by_name(&format!("{CONV_PREFIX}{}.w", layer + 1));
        let b = p.by_name(&format!("{CONV_PREFIX}{}.b", layer + 1));
        x = conv1d_forward(&x, w, b, k, CONV_DILATION);
        if layer < 2 {
            x.data.iter_mut().for_each(|v| *v = leaky_relu(*v, LEAKY_SLOPE));
        }
    }
    crate::model::rir_from_rows(&x, rir.sample_rate())
}

/// Renders the full response for a query by evaluating the field over all
/// time indices and both channels in one batched pass.
pub fn render_rir(model: &Model, query: &Query, contexts: &[BoundaryContext], diagonal: f64) -> Result<Rir> {
    let features = ItemFeatures::from_contexts(contexts, query.orientation, diagonal, &model.config)?;
    Ok(model.render(&features))
}

/// The same response evaluated one time index at a time: every `t` gets
/// its own single-row pass through the field graph.
pub fn render_rir_sequential(model: &Model, features: &ItemFeatures) -> Result<Rir> {
    let cfg = &model.config;
    let tvec = model.time_vectors();
    let mut channels = [Vec::with_capacity(cfg.rir_length), Vec::with_capacity(cfg.rir_length)];
    for t in 0..cfg.rir_length {
        let mut tape = Tape::new(&model.params);
        let row = tape.constant(Matrix::row_vector(tvec.row(t).to_vec()));
        let cmat = crate::context::context_graph(cfg, &mut tape, features);
        let out = field_graph(cfg, &mut tape, row, cmat, features.orientation);
        let v = tape.value(out);
        channels[0].push(v.data[0]);
        channels[1].push(v.data[1]);
    }
    let [left, right] = channels;
    let rir = Rir::new(left, right, cfg.sample_rate)?;
    Ok(if cfg.apply_temporal { temporal_refine(&rir, model) } else { rir })
}

/// The response built from the unfactored definition: for each `t`, the
/// query `C_t` from [`condition_on`] fed through [`field_forward`].
pub fn render_rir_reference(model: &Model, features: &ItemFeatures) -> Result<Rir> {
    let cfg = &model.config;
    let c = encode_contexts(model, features);
    let mut channels = [Vec::with_capacity(cfg.rir_length), Vec::with_capacity(cfg.rir_length)];
    for t in 1..=cfg.rir_length {
        let query = condition_on(&c, &time_vector(model, t)?)?;
        for (ch, out) in channels.iter_mut().enumerate() {
            out.push(field_forward(&query.data, features.orientation, ch, model));
        }
    }
    let [left, right] = channels;
    let rir = Rir::new(left, right, cfg.sample_rate)?;
    Ok(if cfg.apply_temporal { temporal_refine(&rir, model) } else { rir })
}
