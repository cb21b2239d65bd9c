use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// 1-D convolutions over time with mel bins as input channels.
    Conv1d,
    /// 2-D convolutions over (time, frequency), flattened per frame.
    Conv2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per-frame normalisation across channels.
    Layer,
    /// Per-channel normalisation across time.
    Instance,
    None,
}

/// Residual convolutional encoder producing one vector per (strided) frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub input_dim: usize,
    pub channels: Vec<usize>,
    /// Residual blocks per stage.
    pub blocks: Vec<usize>,
    pub kernel: usize,
    /// Temporal stride of the stem convolution.
    pub stride: usize,
    pub norm: NormKind,
    pub embedding_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Conv1d,
            input_dim: 64,
            channels: vec![16, 32, 64, 128],
            blocks: vec![1, 1, 1, 1],
            kernel: 3,
            stride: 1,
            norm: NormKind::Layer,
            embedding_dim: 256,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 {
            return Err(Error::Config("embedding_dim must be at least 2".into()));
        }
        if self.stride == 0 || self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config("stride must be >= 1 and kernel odd".into()));
        }
        if self.channels.is_empty() || self.channels.len() != self.blocks.len() {
            return Err(Error::Config("channels and blocks must be non-empty and equally long".into()));
        }
        if self.channels.contains(&0) || self.input_dim == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        Ok(())
    }

    /// Output frame count for `t` input frames.
    pub fn output_frames(&self, t: usize) -> usize {
        let pad = self.kernel / 2;
        if t + 2 * pad < self.kernel {
            0
        } else {
            (t + 2 * pad - self.kernel) / self.stride + 1
        }
    }

    /// Frequency extent after the 2-D stages (each stage after the first
    /// halves it).
    fn freq_out(&self) -> usize {
        let mut f = self.input_dim;
        for _ in 1..self.channels.len() {
            f = (f + 2 - 3) / 2 + 1;
        }
        f
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    conv1: (ParamId, ParamId),
    norm1: Option<Norm>,
    conv2: (ParamId, ParamId),
    norm2: Option<Norm>,
    proj: Option<ParamId>,
    /// Frequency stride of the first convolution (2-D only).
    freq_stride: usize,
}

/// Parameter handles of an encoder living in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    input_mean: ParamId,
    input_scale: ParamId,
    stem: (ParamId, ParamId),
    stem_norm: Option<Norm>,
    blocks: Vec<Block>,
    out_w: ParamId,
    out_b: ParamId,
}

fn add_norm(store: &mut ParamStore, name: &str, kind: NormKind, c: usize) -> Option<Norm> {
    (kind != NormKind::None).then(|| Norm {
        gain: store.add_ones(format!("{name}.gain"), &[c]),
        bias: store.add_zeros(format!("{name}.bias"), &[c]),
    })
}

impl Encoder {
    /// Registers freshly initialised parameters under `prefix`.
    pub fn init(store: &mut ParamStore, prefix: &str, config: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let k = config.kernel;
        let two_d = config.kind == EncoderKind::Conv2d;
        let p = |s: &str| format!("{prefix}{s}");
        // fixed input standardisation, set from data before training
        let input_mean = store.add_zeros(p("input.mean"), &[config.input_dim]);
        let input_scale = store.add_ones(p("input.scale"), &[config.input_dim]);
        store.set_trainable(input_mean, false);
        store.set_trainable(input_scale, false);

        let conv_shape = |cin: usize, cout: usize| -> Vec<usize> {
            if two_d {
                vec![k, k, cin, cout]
            } else {
                vec![k, cin, cout]
            }
        };
        let fan = |cin: usize| if two_d { k * k * cin } else { k * cin };
        let c0 = config.channels[0];
        let stem_in = if two_d { 1 } else { config.input_dim };
        let stem = (
            store.add_he_uniform(p("stem.w"), &conv_shape(stem_in, c0), fan(stem_in), rng),
            store.add_zeros(p("stem.b"), &[c0]),
        );
        let stem_norm = add_norm(store, &p("stem.norm"), config.norm, c0);
        let mut blocks = Vec::new();
        let mut cin = c0;
        for (s, (&c, &n)) in config.channels.iter().zip(&config.blocks).enumerate() {
            for j in 0..n {
                let name = format!("{prefix}stage{s}.block{j}");
                let conv1 = (
                    store.add_he_uniform(format!("{name}.conv1.w"), &conv_shape(cin, c), fan(cin), rng),
                    store.add_zeros(format!("{name}.conv1.b"), &[c]),
                );
                let norm1 = add_norm(store, &format!("{name}.norm1"), config.norm, c);
                // second conv starts small so each block begins near identity
                let w2 = store.add_he_uniform(format!("{name}.conv2.w"), &conv_shape(c, c), fan(c), rng);
                store.value_mut(w2).data_mut().iter_mut().for_each(|v| *v *= 0.1);
                let conv2 = (w2, store.add_zeros(format!("{name}.conv2.b"), &[c]));
                let norm2 = add_norm(store, &format!("{name}.norm2"), config.norm, c);
                let freq_stride = if two_d && s > 0 && j == 0 { 2 } else { 1 };
                let proj = (cin != c).then(|| store.add_he_uniform(format!("{name}.proj"), &[cin, c], cin, rng));
                blocks.push(Block {
                    conv1,
                    norm1,
                    conv2,
                    norm2,
                    proj,
                    freq_stride,
                });
                cin = c;
            }
        }
        let flat = if two_d { cin * config.freq_out() } else { cin };
        let out_w = store.add_he_uniform(p("out.w"), &[flat, config.embedding_dim], flat, rng);
        let out_b = store.add_zeros(p("out.b"), &[config.embedding_dim]);
        Ok(Encoder {
            config: config.clone(),
            input_mean,
            input_scale,
            stem,
            stem_norm,
            blocks,
            out_w,
            out_b,
        })
    }

    /// Rebinds handles against a store that already holds parameters of
    /// this layout (matched by name and shape).
    pub fn bind(store: &ParamStore, prefix: &str, config: &EncoderConfig) -> Result<Self> {
        let mut scratch = ParamStore::new();
        let mut fresh = Encoder::init(&mut scratch, prefix, config, &mut crate::numerics::rng_for(0, 0))?;
        let mut map = Vec::with_capacity(scratch.len());
        for (_, p) in scratch.iter() {
            match store.id(&p.name) {
                Some(j) if store.value(j).shape() == p.value.shape() => map.push(j),
                _ => {
                    return Err(Error::Format(format!(
                        "parameter {} missing or mismatched in stored encoder",
                        p.name
                    )))
                }
            }
        }
        fresh.remap(|id| map[id.index()]);
        Ok(fresh)
    }

    fn remap(&mut self, f: impl Fn(ParamId) -> ParamId) {
        let norm = |n: &mut Option<Norm>| {
            if let Some(n) = n {
                n.gain = f(n.gain);
                n.bias = f(n.bias);
            }
        };
        self.input_mean = f(self.input_mean);
        self.input_scale = f(self.input_scale);
        self.stem = (f(self.stem.0), f(self.stem.1));
        norm(&mut self.stem_norm);
        for b in &mut self.blocks {
            b.conv1 = (f(b.conv1.0), f(b.conv1.1));
            b.conv2 = (f(b.conv2.0), f(b.conv2.1));
            norm(&mut b.norm1);
            norm(&mut b.norm2);
            b.proj = b.proj.map(&f);
        }
        self.out_w = f(self.out_w);
        self.out_b = f(self.out_b);
    }

    /// Sets the fixed input standardisation from per-bin statistics.
    pub fn set_input_stats(&self, store: &mut ParamStore, mean: &[f64], std: &[f64]) {
        store.value_mut(self.input_mean).data_mut().copy_from_slice(mean);
        for (s, v) in store.value_mut(self.input_scale).data_mut().iter_mut().zip(std) {
            *s = 1.0 / v.max(1e-3);
        }
    }

    fn norm(&self, g: &mut Graph, x: NodeId, n: &Option<Norm>) -> Result<NodeId> {
        let Some(n) = n else { return Ok(x) };
        let y = match self.config.norm {
            NormKind::Layer => g.layer_norm_rows(x, 1e-5)?,
            NormKind::Instance => g.instance_norm(x, 1e-5)?,
            NormKind::None => x,
        };
        let gain = g.param(n.gain);
        let bias = g.param(n.bias);
        let y = g.mul_cols(y, gain)?;
        g.add_bias(y, bias)
    }

    /// `[T, input_dim]` features to `[T', E]` frame activations.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::shape(
                "encoder input",
                format!("expected [T, {}], got {:?}", self.config.input_dim, shape),
            ));
        }
        if self.config.output_frames(shape[0]) == 0 {
            return Err(Error::InvalidArgument(format!("{} frames are too few for the encoder", shape[0])));
        }
        let mean = g.param(self.input_mean);
        let scale = g.param(self.input_scale);
        let neg = g.scale(mean, -1.0);
        let x = g.add_bias(x, neg)?;
        let x = g.mul_cols(x, scale)?;
        match self.config.kind {
            EncoderKind::Conv1d => self.forward_1d(g, x),
            EncoderKind::Conv2d => self.forward_2d(g, x),
        }
    }

    fn forward_1d(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let pad = self.config.kernel / 2;
        let (w, b) = (g.param(self.stem.0), g.param(self.stem.1));
        let h = g.conv1d(x, w, Some(b), self.config.stride, pad)?;
        let h = self.norm(g, h, &self.stem_norm)?;
        let mut h = g.relu(h);
        for blk in &self.blocks {
            let (w1, b1) = (g.param(blk.conv1.0), g.param(blk.conv1.1));
            let y = g.conv1d(h, w1, Some(b1), 1, pad)?;
            let y = self.norm(g, y, &blk.norm1)?;
            let y = g.relu(y);
            let (w2, b2) = (g.param(blk.conv2.0), g.param(blk.conv2.1));
            let y = g.conv1d(y, w2, Some(b2), 1, pad)?;
            let y = self.norm(g, y, &blk.norm2)?;
            let sc = match blk.proj {
                Some(p) => {
                    let p = g.param(p);
                    g.matmul(h, p)?
                }
                None => h,
            };
            let s = g.add(y, sc)?;
            h = g.relu(s);
        }
        let (w, b) = (g.param(self.out_w), g.param(self.out_b));
        g.linear(h, w, Some(b))
    }

    /// Norm over channels of a `[t, f, c]` map, via a `[t·f, c]` view.
    fn norm_2d(&self, g: &mut Graph, x: NodeId, n: &Option<Norm>) -> Result<NodeId> {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
        let y = self.norm(g, flat, n)?;
        g.reshape(y, &s)
    }

    fn forward_2d(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let k = self.config.kernel;
        let pad = k / 2;
        let s = g.shape(x).to_vec();
        let x = g.reshape(x, &[s[0], s[1], 1])?;
        let (w, b) = (g.param(self.stem.0), g.param(self.stem.1));
        let h = g.conv2d(x, w, Some(b), (self.config.stride, 1), (pad, pad))?;
        let h = self.norm_2d(g, h, &self.stem_norm)?;
        let mut h = g.relu(h);
        for blk in &self.blocks {
            let (w1, b1) = (g.param(blk.conv1.0), g.param(blk.conv1.1));
            let y = g.conv2d(h, w1, Some(b1), (1, blk.freq_stride), (pad, pad))?;
            let y = self.norm_2d(g, y, &blk.norm1)?;
            let y = g.relu(y);
            let (w2, b2) = (g.param(blk.conv2.0), g.param(blk.conv2.1));
            let y = g.conv2d(y, w2, Some(b2), (1, 1), (pad, pad))?;
            let y = self.norm_2d(g, y, &blk.norm2)?;
            let ys = g.shape(y).to_vec();
            let sc = if blk.freq_stride > 1 || blk.proj.is_some() {
                // subsample frequency then project channels
                let hs = g.shape(h).to_vec();
                let mut sc = h;
                if blk.freq_stride > 1 {
                    let eye: Vec<f64> = (0..hs[2] * hs[2])
                        .map(|i| if i / hs[2] == i % hs[2] { 1.0 } else { 0.0 })
                        .collect();
                    let id = g.input(Tensor::new(vec![1, 1, hs[2], hs[2]], eye)?);
                    sc = g.conv2d(sc, id, None, (1, blk.freq_stride), (0, 0))?;
                }
                let ss = g.shape(sc).to_vec();
                let flat = g.reshape(sc, &[ss[0] * ss[1], ss[2]])?;
                let flat = match blk.proj {
                    Some(p) => {
                        let p = g.param(p);
                        g.matmul(flat, p)?
                    }
                    None => flat,
                };
                g.reshape(flat, &ys)?
            } else {
                h
            };
            let sum = g.add(y, sc)?;
            h = g.relu(sum);
        }
        let hs = g.shape(h).to_vec();
        let flat = g.reshape(h, &[hs[0], hs[1] * hs[2]])?;
        let (w, b) = (g.param(self.out_w), g.param(self.out_b));
        g.linear(flat, w, Some(b))
    }
}

/// Per-bin mean and standard deviation over all frames of a feature set.
pub fn feature_stats<'a>(feats: impl IntoIterator<Item = &'a Tensor>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let (mut s, mut s2, mut n) = (vec![0.0; dim], vec![0.0; dim], 0usize);
    for f in feats {
        for t in 0..f.rows() {
            for (j, &v) in f.row(t).iter().enumerate() {
                s[j] += v;
                s2[j] += v * v;
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = s.iter().map(|v| v / n).collect();
    let std = s2.iter().zip(&mean).map(|(v, m)| (v / n - m * m).max(0.0).sqrt()).collect();
    (mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_for;

    fn tiny(kind: EncoderKind) -> EncoderConfig {
        EncoderConfig {
            kind,
            input_dim: 8,
            channels: vec![4, 6],
            blocks: vec![1, 1],
            embedding_dim: 5,
            ..Default::default()
        }
    }

    #[test]
    fn output_shapes() {
        for kind in [EncoderKind::Conv1d, EncoderKind::Conv2d] {
            let mut store = ParamStore::new();
            let enc = Encoder::init(&mut store, "e.", &tiny(kind), &mut rng_for(1, 0)).unwrap();
            let mut g = Graph::inference(&store);
            let x = g.input(Tensor::full(&[12, 8], 0.3));
            let y = enc.forward(&mut g, x).unwrap();
            assert_eq!(g.shape(y), &[12, 5]);
        }
    }

    #[test]
    fn stride_reduces_frames() {
        let cfg = EncoderConfig { stride: 2, ..tiny(EncoderKind::Conv1d) };
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, "", &cfg, &mut rng_for(1, 0)).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::full(&[11, 8], 0.3));
        let y = enc.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y)[0], cfg.output_frames(11));
        assert_eq!(cfg.output_frames(11), 6);
    }

    #[test]
    fn wrong_input_width_is_a_shape_error() {
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, "", &tiny(EncoderKind::Conv1d), &mut rng_for(1, 0)).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.input(Tensor::zeros(&[5, 7]));
        assert!(enc.forward(&mut g, x).is_err());
    }

    #[test]
    fn bind_rejects_other_layouts() {
        let mut store = ParamStore::new();
        Encoder::init(&mut store, "", &tiny(EncoderKind::Conv1d), &mut rng_for(1, 0)).unwrap();
        assert!(Encoder::bind(&store, "", &tiny(EncoderKind::Conv1d)).is_ok());
        assert!(Encoder::bind(&store, "", &tiny(EncoderKind::Conv2d)).is_err());
    }
}
