//! Convolutional encoder with hand-written reverse-mode gradients.
//!
//! Activations are stored channel-major (CHW). Each block is a 3x3 convolution
//! with zero padding followed by ELU; all blocks but the last are followed by
//! 2x2 average pooling. Global average pooling, a linear projection and L2
//! normalisation produce the embedding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_height: usize,
    pub input_width: usize,
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_height: 32,
            input_width: 16,
            channels: vec![12, 24, 48],
            embedding_dim: 64,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvSlot {
    pub cin: usize,
    pub cout: usize,
    pub height: usize,
    pub width: usize,
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub convs: Vec<ConvSlot>,
    pub proj_weight: usize,
    pub proj_bias: usize,
    pub len: usize,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let blocks = self.channels.len();
        if !(1..=4).contains(&blocks) || self.channels.contains(&0) || self.embedding_dim == 0 {
            return Err(Error::Config(format!("unsupported architecture {self:?}")));
        }
        let factor = 1usize << (blocks - 1);
        if self.input_height % factor != 0 || self.input_width % factor != 0 || self.input_height < factor || self.input_width < factor {
            return Err(Error::Config(format!(
                "input {}x{} must be a positive multiple of {factor} for {blocks} blocks",
                self.input_height, self.input_width
            )));
        }
        Ok(())
    }

    pub(crate) fn layout(&self) -> Layout {
        let mut convs = Vec::with_capacity(self.channels.len());
        let (mut h, mut w, mut cin, mut off) = (self.input_height, self.input_width, 3, 0);
        for (b, &cout) in self.channels.iter().enumerate() {
            if b > 0 {
                h /= 2;
                w /= 2;
            }
            let weight = off;
            off += cout * cin * 9;
            let bias = off;
            off += cout;
            convs.push(ConvSlot { cin, cout, height: h, width: w, weight, bias });
            cin = cout;
        }
        let proj_weight = off;
        off += self.embedding_dim * cin;
        let proj_bias = off;
        off += self.embedding_dim;
        Layout { convs, proj_weight, proj_bias, len: off }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }

    pub(crate) fn init_params<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        use rand_distr::{Distribution, Normal};
        let layout = self.layout();
        let mut p = vec![0.0; layout.len];
        for c in &layout.convs {
            let std = (2.0 / (c.cin * 9) as f64).sqrt();
            let n = Normal::new(0.0, std).expect("finite std");
            for v in &mut p[c.weight..c.weight + c.cout * c.cin * 9] {
                *v = n.sample(rng);
            }
        }
        let last = *self.channels.last().expect("validated");
        let n = Normal::new(0.0, (1.0 / last as f64).sqrt()).expect("finite std");
        for v in &mut p[layout.proj_weight..layout.proj_weight + self.embedding_dim * last] {
            *v = n.sample(rng);
        }
        p
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    norm: f64,
    embedding: Vec<f64>,
}

impl Tape {
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn into_embedding(self) -> Vec<f64> {
        self.embedding
    }
}

#[inline]
fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

#[inline]
fn elu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        z.exp()
    }
}

/// Row range `[lo, hi)` of outputs whose tap at offset `d` stays inside `[0, n)`.
#[inline]
fn valid(n: usize, d: isize) -> (usize, usize) {
    ((-d).max(0) as usize, (n as isize - d.max(0)) as usize)
}

fn conv_forward(input: &[f64], c: &ConvSlot, params: &[f64]) -> Vec<f64> {
    let (h, w) = (c.height, c.width);
    let hw = h * w;
    let weight = &params[c.weight..c.weight + c.cout * c.cin * 9];
    let bias = &params[c.bias..c.bias + c.cout];
    let mut out = vec![0.0; c.cout * hw];
    for o in 0..c.cout {
        let out_o = &mut out[o * hw..(o + 1) * hw];
        out_o.fill(bias[o]);
        for i in 0..c.cin {
            let in_i = &input[i * hw..(i + 1) * hw];
            for k in 0..9 {
                let wv = weight[(o * c.cin + i) * 9 + k];
                let (dy, dx) = ((k / 3) as isize - 1, (k % 3) as isize - 1);
                let (y0, y1) = valid(h, dy);
                let (x0, x1) = valid(w, dx);
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let orow = &mut out_o[y * w + x0..y * w + x1];
                    let irow = &in_i[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    for (a, b) in orow.iter_mut().zip(irow) {
                        *a += wv * b;
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(input: &[f64], c: &ConvSlot, params: &[f64], dout: &[f64], mut dparams: Option<&mut [f64]>, mut dinput: Option<&mut [f64]>) {
    let (h, w) = (c.height, c.width);
    let hw = h * w;
    let weight = &params[c.weight..c.weight + c.cout * c.cin * 9];
    for o in 0..c.cout {
        let dout_o = &dout[o * hw..(o + 1) * hw];
        if let Some(dp) = dparams.as_deref_mut() {
            dp[c.bias + o] += dout_o.iter().sum::<f64>();
        }
        for i in 0..c.cin {
            let in_i = &input[i * hw..(i + 1) * hw];
            for k in 0..9 {
                let widx = (o * c.cin + i) * 9 + k;
                let wv = weight[widx];
                let (dy, dx) = ((k / 3) as isize - 1, (k % 3) as isize - 1);
                let (y0, y1) = valid(h, dy);
                let (x0, x1) = valid(w, dx);
                let mut acc = 0.0;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    let drow = &dout_o[y * w + x0..y * w + x1];
                    if dparams.is_some() {
                        let irow = &in_i[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        acc += drow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if let Some(di) = dinput.as_deref_mut() {
                        let base = i * hw + sy * w + sx0;
                        for (t, d) in di[base..base + (x1 - x0)].iter_mut().zip(drow) {
                            *t += wv * d;
                        }
                    }
                }
                if let Some(dp) = dparams.as_deref_mut() {
                    dp[c.weight + widx] += acc;
                }
            }
        }
    }
}

fn avg_pool(input: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        for y in 0..oh {
            for x in 0..ow {
                let base = c * h * w + 2 * y * w + 2 * x;
                out[(c * oh + y) * ow + x] = 0.25 * (input[base] + input[base + 1] + input[base + w] + input[base + w + 1]);
            }
        }
    }
    out
}

fn avg_pool_backward(dout: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut din = vec![0.0; channels * h * w];
    for c in 0..channels {
        for y in 0..oh {
            for x in 0..ow {
                let g = 0.25 * dout[(c * oh + y) * ow + x];
                let base = c * h * w + 2 * y * w + 2 * x;
                din[base] = g;
                din[base + 1] = g;
                din[base + w] = g;
                din[base + w + 1] = g;
            }
        }
    }
    din
}

/// Runs the encoder on a CHW input of the architecture's size.
pub(crate) fn forward(arch: &Architecture, layout: &Layout, params: &[f64], input: Vec<f64>) -> Result<Tape> {
    let mut inputs = Vec::with_capacity(layout.convs.len());
    let mut pre = Vec::with_capacity(layout.convs.len());
    let mut x = input;
    for (b, c) in layout.convs.iter().enumerate() {
        let z = conv_forward(&x, c, params);
        let mut a: Vec<f64> = z.iter().map(|v| elu(*v)).collect();
        if b + 1 < layout.convs.len() {
            a = avg_pool(&a, c.cout, c.height, c.width);
        }
        inputs.push(std::mem::replace(&mut x, a));
        pre.push(z);
    }
    let last = layout.convs.last().expect("at least one block");
    let hw = (last.height * last.width) as f64;
    let pooled: Vec<f64> = (0..last.cout)
        .map(|ch| x[ch * last.height * last.width..(ch + 1) * last.height * last.width].iter().sum::<f64>() / hw)
        .collect();
    let d = arch.embedding_dim;
    let pw = &params[layout.proj_weight..layout.proj_weight + d * last.cout];
    let pb = &params[layout.proj_bias..layout.proj_bias + d];
    let z: Vec<f64> = (0..d)
        .map(|k| pb[k] + pw[k * last.cout..(k + 1) * last.cout].iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || norm < 1e-12 {
        return Err(Error::Numerical(format!("degenerate embedding (norm {norm})")));
    }
    let embedding = z.iter().map(|v| v / norm).collect();
    Ok(Tape { inputs, pre, pooled, norm, embedding })
}

/// Propagates `d_embedding` back, accumulating parameter gradients and
/// returning the CHW input gradient when requested.
pub(crate) fn backward(
    arch: &Architecture,
    layout: &Layout,
    params: &[f64],
    tape: &Tape,
    d_embedding: &[f64],
    mut dparams: Option<&mut [f64]>,
    want_input: bool,
) -> Option<Vec<f64>> {
    let d = arch.embedding_dim;
    let e = &tape.embedding;
    let proj = e.iter().zip(d_embedding).map(|(a, b)| a * b).sum::<f64>();
    let dz: Vec<f64> = (0..d).map(|k| (d_embedding[k] - e[k] * proj) / tape.norm).collect();
    let last = *layout.convs.last().expect("at least one block");
    let pw = &params[layout.proj_weight..layout.proj_weight + d * last.cout];
    let mut dpooled = vec![0.0; last.cout];
    for k in 0..d {
        for (ch, dp) in dpooled.iter_mut().enumerate() {
            *dp += dz[k] * pw[k * last.cout + ch];
        }
    }
    if let Some(dp) = dparams.as_deref_mut() {
        for k in 0..d {
            dp[layout.proj_bias + k] += dz[k];
            for ch in 0..last.cout {
                dp[layout.proj_weight + k * last.cout + ch] += dz[k] * tape.pooled[ch];
            }
        }
    }
    let hw = last.height * last.width;
    let mut grad: Vec<f64> = (0..last.cout * hw).map(|i| dpooled[i / hw] / hw as f64).collect();
    for b in (0..layout.convs.len()).rev() {
        let c = &layout.convs[b];
        if b + 1 < layout.convs.len() {
            grad = avg_pool_backward(&grad, c.cout, c.height, c.width);
        }
        for (g, z) in grad.iter_mut().zip(&tape.pre[b]) {
            *g *= elu_grad(*z);
        }
        let need_input = b > 0 || want_input;
        let mut dinput = if need_input { Some(vec![0.0; c.cin * c.height * c.width]) } else { None };
        conv_backward(&tape.inputs[b], c, params, &grad, dparams.as_deref_mut(), dinput.as_deref_mut());
        match dinput {
            Some(di) => grad = di,
            None => return None,
        }
    }
    Some(grad)
}
