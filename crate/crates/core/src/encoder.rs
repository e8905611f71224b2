//! Per-frame feature extraction: a small convolutional stem (stride 8 total)
//! followed by a 2-layer self-attention encoder. Target and context frames go
//! through the same parameters.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{sine_positional_encoding, FeedForward, LayerNorm, MultiHeadAttention, ParamList};
use crate::tensor::{Tape, Tensor};

pub const BACKBONE_STRIDE: usize = 8;

/// RGB frame, channel-major floats in [0,1].
#[derive(Clone)]
pub struct FrameImage {
    pub height: usize,
    pub width: usize,
    /// [3, height, width] row-major
    pub data: Vec<f64>,
}

impl FrameImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<FrameImage> {
        if height == 0 || width == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if data.len() != 3 * height * width {
            return Err(Error::dim(
                "frame_image",
                format!("expected {} values, got {}", 3 * height * width, data.len()),
            ));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Numeric("image values must lie in [0,1]".into()));
        }
        Ok(FrameImage { height, width, data })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[3, self.height, self.width], self.data.clone()).unwrap()
    }
}

/// Encoded token grid of one frame.
pub struct MemoryMap {
    pub tokens: Tensor, // [(grid_h*grid_w), d]
    pub grid_h: usize,
    pub grid_w: usize,
    /// temporal offset relative to the target frame (0 for the target)
    pub frame_offset: i64,
}

struct ConvLayer {
    weight: Tensor, // [out_c, in_c*k*k]
    bias: Tensor,   // [out_c]
    in_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvLayer {
    fn new(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> ConvLayer {
        let fan = in_c * k * k;
        ConvLayer {
            weight: crate::nn::xavier_uniform(rng, out_c, fan),
            bias: Tensor::param(&[out_c], vec![0.0; out_c]).unwrap(),
            in_c,
            k,
            stride,
            pad,
        }
    }

    /// x: [in_c, H, W] -> [out_c, oh, ow] via im2col + matmul.
    fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s[0] != self.in_c {
            return Err(Error::dim(
                "conv",
                format!("expected {} input channels, got {}", self.in_c, s[0]),
            ));
        }
        let oh = (s[1] + 2 * self.pad - self.k) / self.stride + 1;
        let ow = (s[2] + 2 * self.pad - self.k) / self.stride + 1;
        let cols = tape.im2col(x, self.k, self.stride, self.pad)?;
        let y = tape.matmul(&self.weight, &cols)?; // [out_c, oh*ow]
        // per-channel bias: work in token-major layout for broadcast_add
        let yt = tape.transpose(&y)?;
        let yt = tape.broadcast_add(&yt, &self.bias)?;
        let y = tape.transpose(&yt)?;
        tape.reshape(&y, &[self.weight.shape()[0], oh, ow])
    }

    fn params(&self, prefix: &str, out: &mut ParamList) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Toy stem replacing the paper-scale ResNet: three stride-2 conv+relu stages
/// and a 1x1 projection to the model dim.
pub struct Backbone {
    conv1: ConvLayer,
    conv2: ConvLayer,
    conv3: ConvLayer,
    proj: ConvLayer,
    pub model_dim: usize,
}

impl Backbone {
    pub fn new(rng: &mut ChaCha8Rng, model_dim: usize) -> Backbone {
        Backbone {
            conv1: ConvLayer::new(rng, 3, 16, 3, 2, 1),
            conv2: ConvLayer::new(rng, 16, 32, 3, 2, 1),
            conv3: ConvLayer::new(rng, 32, 32, 3, 2, 1),
            proj: ConvLayer::new(rng, 32, model_dim, 1, 1, 0),
            model_dim,
        }
    }

    /// Image tensor [3,H,W] -> token matrix [(H/8 * W/8), d].
    pub fn forward(&self, tape: &Tape, img: &Tensor) -> Result<Tensor> {
        let s = img.shape();
        if s.len() != 3 || s[1] % BACKBONE_STRIDE != 0 || s[2] % BACKBONE_STRIDE != 0 {
            return Err(Error::Config(format!(
                "image dims {:?} must be divisible by the backbone stride {}",
                s, BACKBONE_STRIDE
            )));
        }
        let x = tape.relu(&self.conv1.forward(tape, img)?)?;
        let x = tape.relu(&self.conv2.forward(tape, &x)?)?;
        let x = tape.relu(&self.conv3.forward(tape, &x)?)?;
        let x = self.proj.forward(tape, &x)?; // [d, h', w']
        let sh = x.shape();
        let flat = tape.reshape(&x, &[sh[0], sh[1] * sh[2]])?;
        tape.transpose(&flat) // [(h'*w'), d]
    }

    pub fn grid_dims(&self, height: usize, width: usize) -> (usize, usize) {
        (height / BACKBONE_STRIDE, width / BACKBONE_STRIDE)
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.conv1.params(&format!("{prefix}.conv1"), out);
        self.conv2.params(&format!("{prefix}.conv2"), out);
        self.conv3.params(&format!("{prefix}.conv3"), out);
        self.proj.params(&format!("{prefix}.proj"), out);
    }
}

struct EncoderLayer {
    attn: MultiHeadAttention,
    norm: LayerNorm,
    ffn: FeedForward,
}

/// Shared frame encoder: stem tokens + sine positional encoding, then
/// self-attention layers.
pub struct FrameEncoder {
    pub backbone: Backbone,
    layers: Vec<EncoderLayer>,
}

impl FrameEncoder {
    pub fn new(rng: &mut ChaCha8Rng, model_dim: usize, heads: usize, layer_count: usize) -> Result<FrameEncoder> {
        let backbone = Backbone::new(rng, model_dim);
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            layers.push(EncoderLayer {
                attn: MultiHeadAttention::new(rng, model_dim, heads)?,
                norm: LayerNorm::new(model_dim),
                ffn: FeedForward::new(rng, model_dim, 4 * model_dim),
            });
        }
        Ok(FrameEncoder { backbone, layers })
    }

    pub fn encode(&self, tape: &Tape, img: &FrameImage, frame_offset: i64) -> Result<MemoryMap> {
        self.encode_tensor(tape, &img.to_tensor(), img.height, img.width, frame_offset)
    }

    pub fn encode_tensor(
        &self,
        tape: &Tape,
        img: &Tensor,
        height: usize,
        width: usize,
        frame_offset: i64,
    ) -> Result<MemoryMap> {
        let tokens = self.backbone.forward(tape, img)?;
        let (gh, gw) = self.backbone.grid_dims(height, width);
        let pos = sine_positional_encoding(gh, gw, self.backbone.model_dim)?;
        // positional encoding enters once, before layer 1
        let mut x = tape.add(&tokens, &pos)?;
        for layer in &self.layers {
            let n = layer.norm.forward(tape, &x)?;
            let (att, _) = layer.attn.forward(tape, &n, &n)?;
            x = tape.add(&x, &att)?;
            x = layer.ffn.forward(tape, &x)?;
        }
        Ok(MemoryMap {
            tokens: x,
            grid_h: gh,
            grid_w: gw,
            frame_offset,
        })
    }

    pub fn params(&self, prefix: &str, out: &mut ParamList) {
        self.backbone.params(&format!("{prefix}.backbone"), out);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.attn.params(&format!("{prefix}.layer{i}.attn"), out);
            layer.norm.params(&format!("{prefix}.layer{i}.norm"), out);
            layer.ffn.params(&format!("{prefix}.layer{i}.ffn"), out);
        }
    }
}
