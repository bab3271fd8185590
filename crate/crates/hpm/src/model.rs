//! The three networks: encoder over visible tokens, visual reconstructor,
//! and loss predictor. The two decoders share one architecture and differ
//! only in head width; their parameters are fully disjoint.

use crate::diffmath::tape::{Tape, Var};
use crate::diffmath::Tensor;
use crate::error::{HpmError, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub token_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub output_dim: usize,
}

/// Decoder MLP hidden width is a fixed multiple of the block width.
const DECODER_MLP_RATIO: usize = 4;

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(HpmError::Config(format!(
                "encoder width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.token_dim == 0 || self.mlp_ratio == 0 {
            return Err(HpmError::Config("encoder token_dim and mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(HpmError::Config(format!(
                "decoder width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.output_dim == 0 {
            return Err(HpmError::Config("decoder output_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub reconstructor: DecoderConfig,
    pub loss_predictor: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.reconstructor.validate()?;
        self.loss_predictor.validate()?;
        if self.loss_predictor.output_dim != 1 {
            return Err(HpmError::Config("loss predictor head must be 1-dimensional".into()));
        }
        Ok(())
    }

    /// Desk-scale defaults for a given patch length and reconstruction
    /// target dimension.
    pub fn desk_default(token_dim: usize, target_dim: usize) -> Self {
        let encoder = EncoderConfig { depth: 4, width: 64, heads: 4, mlp_ratio: 4, token_dim };
        let reconstructor = DecoderConfig { depth: 2, width: 64, heads: 4, output_dim: target_dim };
        let loss_predictor = DecoderConfig { depth: 2, width: 64, heads: 4, output_dim: 1 };
        ModelConfig { encoder, reconstructor, loss_predictor }
    }
}

/// One pre-norm transformer block: attention then GELU MLP, both residual.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub mask_token: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Full parameter set. The encoder, reconstructor, and loss predictor
/// partitions never share tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    pub encoder: EncoderParams,
    pub reconstructor: DecoderParams,
    pub loss_predictor: DecoderParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderRole {
    Reconstructor,
    LossPredictor,
}

fn trunc_normal(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap().with_grad()
}

fn zeros_param(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape).with_grad()
}

fn ones_param(shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, vec![1.0; n]).unwrap().with_grad()
}

fn init_block(rng: &mut ChaCha8Rng, width: usize, mlp_hidden: usize) -> BlockParams {
    BlockParams {
        ln1_gain: ones_param(vec![width]),
        ln1_bias: zeros_param(vec![width]),
        wq: trunc_normal(rng, vec![width, width], INIT_STD),
        bq: zeros_param(vec![width]),
        wk: trunc_normal(rng, vec![width, width], INIT_STD),
        bk: zeros_param(vec![width]),
        wv: trunc_normal(rng, vec![width, width], INIT_STD),
        bv: zeros_param(vec![width]),
        wo: trunc_normal(rng, vec![width, width], INIT_STD),
        bo: zeros_param(vec![width]),
        ln2_gain: ones_param(vec![width]),
        ln2_bias: zeros_param(vec![width]),
        w1: trunc_normal(rng, vec![width, mlp_hidden], INIT_STD),
        b1: zeros_param(vec![mlp_hidden]),
        w2: trunc_normal(rng, vec![mlp_hidden, width], INIT_STD),
        b2: zeros_param(vec![width]),
    }
}

/// Truncated-normal weights (std 0.02, clipped at two sigma), zero biases,
/// unit norm gains; deterministic per seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = &cfg.encoder;
    let encoder = EncoderParams {
        embed_w: trunc_normal(&mut rng, vec![e.token_dim, e.width], INIT_STD),
        embed_b: zeros_param(vec![e.width]),
        blocks: (0..e.depth)
            .map(|_| init_block(&mut rng, e.width, e.width * e.mlp_ratio))
            .collect(),
        norm_gain: ones_param(vec![e.width]),
        norm_bias: zeros_param(vec![e.width]),
    };
    let mut init_decoder = |d: &DecoderConfig| DecoderParams {
        proj_w: trunc_normal(&mut rng, vec![e.width, d.width], INIT_STD),
        proj_b: zeros_param(vec![d.width]),
        mask_token: trunc_normal(&mut rng, vec![d.width], INIT_STD),
        blocks: (0..d.depth)
            .map(|_| init_block(&mut rng, d.width, d.width * DECODER_MLP_RATIO))
            .collect(),
        norm_gain: ones_param(vec![d.width]),
        norm_bias: zeros_param(vec![d.width]),
        head_w: trunc_normal(&mut rng, vec![d.width, d.output_dim], INIT_STD),
        head_b: zeros_param(vec![d.output_dim]),
    };
    let reconstructor = init_decoder(&cfg.reconstructor);
    let loss_predictor = init_decoder(&cfg.loss_predictor);
    Ok(ModelParams { cfg: *cfg, encoder, reconstructor, loss_predictor })
}

macro_rules! block_fields {
    () => {
        [
            "ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_gain",
            "ln2_bias", "w1", "b1", "w2", "b2",
        ]
    };
}

impl BlockParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.ln1_gain, &self.ln1_bias, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv,
            &self.bv, &self.wo, &self.bo, &self.ln2_gain, &self.ln2_bias, &self.w1, &self.b1,
            &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_gain, &mut self.ln2_bias, &mut self.w1, &mut self.b1, &mut self.w2,
            &mut self.b2,
        ]
    }
}

impl ModelParams {
    /// Tensors with stable names, in a fixed traversal order. The `enc.`,
    /// `rec.`, and `pred.` prefixes carry the parameter partition.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("enc.embed_w".to_string(), &self.encoder.embed_w));
        out.push(("enc.embed_b".to_string(), &self.encoder.embed_b));
        for (i, b) in self.encoder.blocks.iter().enumerate() {
            for (name, t) in block_fields!().iter().zip(b.tensors()) {
                out.push((format!("enc.block{i}.{name}"), t));
            }
        }
        out.push(("enc.norm_gain".to_string(), &self.encoder.norm_gain));
        out.push(("enc.norm_bias".to_string(), &self.encoder.norm_bias));
        for (prefix, d) in [("rec", &self.reconstructor), ("pred", &self.loss_predictor)] {
            out.push((format!("{prefix}.proj_w"), &d.proj_w));
            out.push((format!("{prefix}.proj_b"), &d.proj_b));
            out.push((format!("{prefix}.mask_token"), &d.mask_token));
            for (i, b) in d.blocks.iter().enumerate() {
                for (name, t) in block_fields!().iter().zip(b.tensors()) {
                    out.push((format!("{prefix}.block{i}.{name}"), t));
                }
            }
            out.push((format!("{prefix}.norm_gain"), &d.norm_gain));
            out.push((format!("{prefix}.norm_bias"), &d.norm_bias));
            out.push((format!("{prefix}.head_w"), &d.head_w));
            out.push((format!("{prefix}.head_b"), &d.head_b));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("enc.embed_w".to_string(), &mut self.encoder.embed_w));
        out.push(("enc.embed_b".to_string(), &mut self.encoder.embed_b));
        for (i, b) in self.encoder.blocks.iter_mut().enumerate() {
            for (name, t) in block_fields!().iter().zip(b.tensors_mut()) {
                out.push((format!("enc.block{i}.{name}"), t));
            }
        }
        out.push(("enc.norm_gain".to_string(), &mut self.encoder.norm_gain));
        out.push(("enc.norm_bias".to_string(), &mut self.encoder.norm_bias));
        for (prefix, d) in
            [("rec", &mut self.reconstructor), ("pred", &mut self.loss_predictor)]
        {
            out.push((format!("{prefix}.proj_w"), &mut d.proj_w));
            out.push((format!("{prefix}.proj_b"), &mut d.proj_b));
            out.push((format!("{prefix}.mask_token"), &mut d.mask_token));
            for (i, b) in d.blocks.iter_mut().enumerate() {
                for (name, t) in block_fields!().iter().zip(b.tensors_mut()) {
                    out.push((format!("{prefix}.block{i}.{name}"), t));
                }
            }
            out.push((format!("{prefix}.norm_gain"), &mut d.norm_gain));
            out.push((format!("{prefix}.norm_bias"), &mut d.norm_bias));
            out.push((format!("{prefix}.head_w"), &mut d.head_w));
            out.push((format!("{prefix}.head_b"), &mut d.head_b));
        }
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.named_tensors().iter().map(|(_, t)| t.numel()).collect()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_tensors_mut() {
            t.zero_grad();
        }
    }

    /// All parameter values flattened in traversal order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, t) in self.named_tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for (_, t) in self.named_tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter vector length mismatch");
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

// ---- tape-side forward ---------------------------------------------------

pub struct BlockVars {
    ln1_gain: Var,
    ln1_bias: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

pub struct EncoderVars {
    embed_w: Var,
    embed_b: Var,
    blocks: Vec<BlockVars>,
    norm_gain: Var,
    norm_bias: Var,
}

pub struct DecoderVars {
    proj_w: Var,
    proj_b: Var,
    mask_token: Var,
    blocks: Vec<BlockVars>,
    norm_gain: Var,
    norm_bias: Var,
    head_w: Var,
    head_b: Var,
}

pub struct ModelVars {
    pub encoder: EncoderVars,
    pub reconstructor: DecoderVars,
    pub loss_predictor: DecoderVars,
    /// Leaf vars aligned with `ModelParams::named_tensors` order.
    pub param_vars: Vec<Var>,
}

fn register_block(tape: &mut Tape, b: &BlockParams, vars: &mut Vec<Var>) -> BlockVars {
    let mut leaf = |t: &Tensor| {
        let v = tape.leaf(t);
        vars.push(v);
        v
    };
    BlockVars {
        ln1_gain: leaf(&b.ln1_gain),
        ln1_bias: leaf(&b.ln1_bias),
        wq: leaf(&b.wq),
        bq: leaf(&b.bq),
        wk: leaf(&b.wk),
        bk: leaf(&b.bk),
        wv: leaf(&b.wv),
        bv: leaf(&b.bv),
        wo: leaf(&b.wo),
        bo: leaf(&b.bo),
        ln2_gain: leaf(&b.ln2_gain),
        ln2_bias: leaf(&b.ln2_bias),
        w1: leaf(&b.w1),
        b1: leaf(&b.b1),
        w2: leaf(&b.w2),
        b2: leaf(&b.b2),
    }
}

fn register_encoder(tape: &mut Tape, e: &EncoderParams, vars: &mut Vec<Var>) -> EncoderVars {
    let embed_w = tape.leaf(&e.embed_w);
    vars.push(embed_w);
    let embed_b = tape.leaf(&e.embed_b);
    vars.push(embed_b);
    let blocks = e.blocks.iter().map(|b| register_block(tape, b, vars)).collect();
    let norm_gain = tape.leaf(&e.norm_gain);
    vars.push(norm_gain);
    let norm_bias = tape.leaf(&e.norm_bias);
    vars.push(norm_bias);
    EncoderVars { embed_w, embed_b, blocks, norm_gain, norm_bias }
}

fn register_decoder(tape: &mut Tape, d: &DecoderParams, vars: &mut Vec<Var>) -> DecoderVars {
    let proj_w = tape.leaf(&d.proj_w);
    vars.push(proj_w);
    let proj_b = tape.leaf(&d.proj_b);
    vars.push(proj_b);
    let mask_token = tape.leaf(&d.mask_token);
    vars.push(mask_token);
    let blocks = d.blocks.iter().map(|b| register_block(tape, b, vars)).collect();
    let norm_gain = tape.leaf(&d.norm_gain);
    vars.push(norm_gain);
    let norm_bias = tape.leaf(&d.norm_bias);
    vars.push(norm_bias);
    let head_w = tape.leaf(&d.head_w);
    vars.push(head_w);
    let head_b = tape.leaf(&d.head_b);
    vars.push(head_b);
    DecoderVars { proj_w, proj_b, mask_token, blocks, norm_gain, norm_bias, head_w, head_b }
}

/// Put every parameter on the tape. `param_vars` order matches
/// `named_tensors`, which the alignment test below pins down.
pub fn register_model(tape: &mut Tape, p: &ModelParams) -> ModelVars {
    let mut vars = Vec::with_capacity(p.param_sizes().len());
    let encoder = register_encoder(tape, &p.encoder, &mut vars);
    let reconstructor = register_decoder(tape, &p.reconstructor, &mut vars);
    let loss_predictor = register_decoder(tape, &p.loss_predictor, &mut vars);
    ModelVars { encoder, reconstructor, loss_predictor, param_vars: vars }
}

fn block_forward(tape: &mut Tape, b: &BlockVars, x: Var, heads: usize) -> Result<Var> {
    let width = tape.shape(x)[1];
    let dh = width / heads;
    let a = tape.layer_norm(x, b.ln1_gain, b.ln1_bias, LN_EPS)?;
    let q = tape.matmul(a, b.wq)?;
    let q = tape.add_row(q, b.bq)?;
    let k = tape.matmul(a, b.wk)?;
    let k = tape.add_row(k, b.bk)?;
    let v = tape.matmul(a, b.wv)?;
    let v = tape.add_row(v, b.bv)?;
    let mut ctx_heads = Vec::with_capacity(heads);
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let att = tape.softmax_rows(scores)?;
        ctx_heads.push(tape.matmul(att, vh)?);
    }
    let ctx = tape.concat_cols(&ctx_heads)?;
    let o = tape.matmul(ctx, b.wo)?;
    let o = tape.add_row(o, b.bo)?;
    let x = tape.add(x, o)?;

    let m = tape.layer_norm(x, b.ln2_gain, b.ln2_bias, LN_EPS)?;
    let h1 = tape.matmul(m, b.w1)?;
    let h1 = tape.add_row(h1, b.b1)?;
    let h1 = tape.gelu(h1);
    let h2 = tape.matmul(h1, b.w2)?;
    let h2 = tape.add_row(h2, b.b2)?;
    tape.add(x, h2)
}

/// Encode the kept token rows: linear patch embedding plus positional
/// embedding, `depth` pre-norm blocks with attention over the kept set
/// only, then a final norm. Output row r corresponds to keep_ids[r].
pub fn encode_on(
    tape: &mut Tape,
    vars: &EncoderVars,
    cfg: &EncoderConfig,
    tokens: Var,
    keep_ids: &[usize],
    pos: Var,
) -> Result<Var> {
    let n = tape.shape(tokens)[0];
    if keep_ids.is_empty() {
        return Err(HpmError::Contract("encode requires at least one visible patch".into()));
    }
    if tape.shape(tokens)[1] != cfg.token_dim {
        return Err(HpmError::Shape {
            op: "encode",
            lhs: tape.shape(tokens).to_vec(),
            rhs: vec![n, cfg.token_dim],
        });
    }
    if tape.shape(pos) != [n, cfg.width] {
        return Err(HpmError::Shape {
            op: "encode_pos",
            lhs: tape.shape(pos).to_vec(),
            rhs: vec![n, cfg.width],
        });
    }
    let kept = tape.gather_rows(tokens, keep_ids)?;
    let emb = tape.matmul(kept, vars.embed_w)?;
    let emb = tape.add_row(emb, vars.embed_b)?;
    let pos_kept = tape.gather_rows(pos, keep_ids)?;
    let mut x = tape.add(emb, pos_kept)?;
    for b in &vars.blocks {
        x = block_forward(tape, b, x, cfg.heads)?;
    }
    tape.layer_norm(x, vars.norm_gain, vars.norm_bias, LN_EPS)
}

/// Project latents to decoder width, place the mask token at every
/// non-kept position, add positional embeddings, run the blocks over all N
/// tokens, and apply the linear head.
pub fn decode_on(
    tape: &mut Tape,
    vars: &DecoderVars,
    cfg: &DecoderConfig,
    latents: Var,
    keep_ids: &[usize],
    n: usize,
    pos: Var,
) -> Result<Var> {
    if tape.shape(latents)[0] != keep_ids.len() {
        return Err(HpmError::Contract(format!(
            "decode: {} latent rows but {} keep ids",
            tape.shape(latents)[0],
            keep_ids.len()
        )));
    }
    if tape.shape(pos) != [n, cfg.width] {
        return Err(HpmError::Shape {
            op: "decode_pos",
            lhs: tape.shape(pos).to_vec(),
            rhs: vec![n, cfg.width],
        });
    }
    let proj = tape.matmul(latents, vars.proj_w)?;
    let proj = tape.add_row(proj, vars.proj_b)?;
    let full = tape.assemble_rows(proj, vars.mask_token, keep_ids, n)?;
    let mut x = tape.add(full, pos)?;
    for b in &vars.blocks {
        x = block_forward(tape, b, x, cfg.heads)?;
    }
    let x = tape.layer_norm(x, vars.norm_gain, vars.norm_bias, LN_EPS)?;
    let out = tape.matmul(x, vars.head_w)?;
    tape.add_row(out, vars.head_b)
}

// ---- value-level wrappers -------------------------------------------------

/// Encoder forward on a scratch tape, values only.
pub fn encode(
    params: &ModelParams,
    tokens: &Tensor,
    keep_ids: &[usize],
    pos: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let tok = tape.constant(tokens.shape().to_vec(), tokens.data().to_vec());
    let pos_v = tape.constant(pos.shape().to_vec(), pos.data().to_vec());
    let mut vars = Vec::new();
    let enc = register_encoder(&mut tape, &params.encoder, &mut vars);
    let out = encode_on(&mut tape, &enc, &params.cfg.encoder, tok, keep_ids, pos_v)?;
    Ok(tape.detach(out))
}

/// Decoder forward on a scratch tape, values only.
pub fn decode(
    params: &ModelParams,
    role: DecoderRole,
    latents: &Tensor,
    keep_ids: &[usize],
    n: usize,
    pos: &Tensor,
) -> Result<Tensor> {
    let (p, cfg) = match role {
        DecoderRole::Reconstructor => (&params.reconstructor, &params.cfg.reconstructor),
        DecoderRole::LossPredictor => (&params.loss_predictor, &params.cfg.loss_predictor),
    };
    let mut tape = Tape::new();
    let lat = tape.constant(latents.shape().to_vec(), latents.data().to_vec());
    let pos_v = tape.constant(pos.shape().to_vec(), pos.data().to_vec());
    let mut vars = Vec::new();
    let dec = register_decoder(&mut tape, p, &mut vars);
    let out = decode_on(&mut tape, &dec, cfg, lat, keep_ids, n, pos_v)?;
    Ok(tape.detach(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::gradcheck::{central_diff, max_rel_err, FD_STEP};
    use crate::patchkit::{sincos_embed, PatchGeometry};
    use rand::Rng;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig { depth: 2, width: 8, heads: 2, mlp_ratio: 2, token_dim: 16 },
            reconstructor: DecoderConfig { depth: 1, width: 8, heads: 2, output_dim: 16 },
            loss_predictor: DecoderConfig { depth: 1, width: 8, heads: 2, output_dim: 1 },
        }
    }

    fn toy_geometry() -> PatchGeometry {
        // 8 x 16 single-channel image with 4-pixel patches: N = 8, token 16.
        PatchGeometry::image(8, 16, 1, 4)
    }

    fn random_tokens(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_rows(n, d, data).unwrap()
    }

    #[test]
    fn same_seed_gives_bit_identical_params() {
        let a = init_params(&toy_cfg(), 42).unwrap();
        let b = init_params(&toy_cfg(), 42).unwrap();
        assert_eq!(a.flat(), b.flat());
        let c = init_params(&toy_cfg(), 43).unwrap();
        assert_ne!(a.flat(), c.flat());
    }

    #[test]
    fn biases_are_exactly_zero() {
        let p = init_params(&toy_cfg(), 1).unwrap();
        for (name, t) in p.named_tensors() {
            let leafname = name.rsplit('.').next().unwrap();
            let is_bias = leafname.ends_with("_b")
                || leafname.ends_with("_bias")
                || matches!(leafname, "bq" | "bk" | "bv" | "bo" | "b1" | "b2");
            if is_bias {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} not zero");
            }
            if leafname.ends_with("_gain") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name} not one");
            }
        }
    }

    #[test]
    fn weight_std_matches_truncated_normal() {
        let cfg = ModelConfig {
            encoder: EncoderConfig { depth: 2, width: 64, heads: 4, mlp_ratio: 4, token_dim: 48 },
            reconstructor: DecoderConfig { depth: 1, width: 64, heads: 4, output_dim: 48 },
            loss_predictor: DecoderConfig { depth: 1, width: 64, heads: 4, output_dim: 1 },
        };
        let p = init_params(&cfg, 9).unwrap();
        let mut vals = Vec::new();
        for (name, t) in p.named_tensors() {
            if name.ends_with(".wq") || name.ends_with(".w1") || name.ends_with("embed_w") {
                vals.extend_from_slice(t.data());
            }
        }
        assert!(vals.len() >= 10_000, "only {} samples", vals.len());
        assert!(vals.iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std =
            (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((0.015..=0.025).contains(&std), "std {std}");
    }

    #[test]
    fn named_tensors_align_with_registration_order() {
        let p = init_params(&toy_cfg(), 7).unwrap();
        let mut tape = Tape::new();
        let vars = register_model(&mut tape, &p);
        let named = p.named_tensors();
        assert_eq!(named.len(), vars.param_vars.len());
        for ((name, t), v) in named.iter().zip(&vars.param_vars) {
            assert_eq!(t.data(), tape.value(*v), "misaligned at {name}");
        }
        // theta / phi / psi partition the set.
        assert!(named.iter().all(|(n, _)| {
            n.starts_with("enc.") || n.starts_with("rec.") || n.starts_with("pred.")
        }));
    }

    #[test]
    fn full_visibility_encode_shape() {
        let p = init_params(&toy_cfg(), 3).unwrap();
        let g = toy_geometry();
        let pos = sincos_embed(&g, 8).unwrap();
        let tokens = random_tokens(8, 16, 4);
        let all: Vec<usize> = (0..8).collect();
        let out = encode(&p, &tokens, &all, &pos).unwrap();
        assert_eq!(out.shape(), &[8, 8]);
    }

    #[test]
    fn encode_rejects_empty_keep_set() {
        let p = init_params(&toy_cfg(), 3).unwrap();
        let g = toy_geometry();
        let pos = sincos_embed(&g, 8).unwrap();
        let tokens = random_tokens(8, 16, 4);
        assert!(matches!(encode(&p, &tokens, &[], &pos), Err(HpmError::Contract(_))));
    }

    #[test]
    fn encode_is_permutation_equivariant() {
        let p = init_params(&toy_cfg(), 5).unwrap();
        let g = toy_geometry();
        let pos = sincos_embed(&g, 8).unwrap();
        let tokens = random_tokens(8, 16, 6);
        let fwd = encode(&p, &tokens, &[2, 5], &pos).unwrap();
        let rev = encode(&p, &tokens, &[5, 2], &pos).unwrap();
        let d = fwd.cols();
        for j in 0..d {
            assert!((fwd.data()[j] - rev.data()[d + j]).abs() < 1e-9);
            assert!((fwd.data()[d + j] - rev.data()[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn depth_zero_encoder_gradient_check() {
        let cfg = ModelConfig {
            encoder: EncoderConfig { depth: 0, width: 8, heads: 2, mlp_ratio: 2, token_dim: 16 },
            reconstructor: DecoderConfig { depth: 0, width: 8, heads: 2, output_dim: 16 },
            loss_predictor: DecoderConfig { depth: 0, width: 8, heads: 2, output_dim: 1 },
        };
        let params = init_params(&cfg, 11).unwrap();
        let g = toy_geometry();
        let pos = sincos_embed(&g, 8).unwrap();
        let tokens = random_tokens(8, 16, 12);
        let keep: Vec<usize> = vec![0, 2, 3, 7];
        let w: Vec<f64> = (0..keep.len() * 8).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();

        let loss_of = |p: &ModelParams, want_grad: bool| -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let tok = tape.constant(tokens.shape().to_vec(), tokens.data().to_vec());
            let pos_v = tape.constant(pos.shape().to_vec(), pos.data().to_vec());
            let vars = register_model(&mut tape, p);
            let enc = encode_on(&mut tape, &vars.encoder, &p.cfg.encoder, tok, &keep, pos_v)
                .unwrap();
            let wv = tape.constant(vec![keep.len(), 8], w.clone());
            let prod = tape.mul(enc, wv).unwrap();
            let loss = tape.sum_all(prod);
            let v = tape.value(loss)[0];
            if !want_grad {
                return (v, Vec::new());
            }
            tape.backward(loss).unwrap();
            let mut grads = Vec::new();
            for var in &vars.param_vars {
                grads.extend(tape.grad(*var));
            }
            (v, grads)
        };

        let base = params.flat();
        let (_, analytic) = loss_of(&params, true);
        let mut probe = params.clone();
        let mut f = |x: &[f64]| {
            probe.set_flat(x);
            loss_of(&probe, false).0
        };
        let numeric = central_diff(&mut f, &base, FD_STEP);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-5, "depth-0 encoder rel err {err}");
    }

    #[test]
    fn decode_full_keep_has_no_mask_tokens() {
        let p = init_params(&toy_cfg(), 13).unwrap();
        let g = toy_geometry();
        let pos = sincos_embed(&g, 8).unwrap();
        let tokens = random_tokens(8, 16, 14);
        let all: Vec<usize> = (0..8).collect();
        let lat = encode(&p, &tokens, &all, &pos).unwrap();
        let out = decode(&p, DecoderRole::Reconstructor, &lat, &all, 8, &pos).unwrap();
        assert_eq!(out.shape(), &[8, 16]);
        // With every position kept, the mask token cannot influence anything:
        // zeroing it changes nothing.
        let mut p2 = p.clone();
        p2.reconstructor.mask_token = Tensor::zeros(vec![8]).with_grad();
        let out2 = decode(&p2, DecoderRole::Reconstructor, &lat, &all, 8, &pos).unwrap();
        assert_eq!(out.data(), out2.data());
    }

    #[test]
    fn loss_predictor_head_is_scalar_field() {
        let p = init_params(&toy_cfg(), 15).unwrap();
        let g = toy_geometry();
        let pos = sincos_embed(&g, 8).unwrap();
        let tokens = random_tokens(8, 16, 16);
        let keep = vec![1, 4, 6];
        let lat = encode(&p, &tokens, &keep, &pos).unwrap();
        let out = decode(&p, DecoderRole::LossPredictor, &lat, &keep, 8, &pos).unwrap();
        assert_eq!(out.shape(), &[8, 1]);
    }

    #[test]
    fn masked_information_barrier_is_exact() {
        let p = init_params(&toy_cfg(), 17).unwrap();
        let g = toy_geometry();
        let pos = sincos_embed(&g, 8).unwrap();
        let mut tokens = random_tokens(8, 16, 18);
        let keep = vec![0, 3, 5];
        let lat1 = encode(&p, &tokens, &keep, &pos).unwrap();
        let rec1 = decode(&p, DecoderRole::Reconstructor, &lat1, &keep, 8, &pos).unwrap();
        // Rewrite a masked patch (id 2) completely.
        for j in 0..16 {
            tokens.data_mut()[2 * 16 + j] = 123.456 + j as f64;
        }
        let lat2 = encode(&p, &tokens, &keep, &pos).unwrap();
        let rec2 = decode(&p, DecoderRole::Reconstructor, &lat2, &keep, 8, &pos).unwrap();
        assert_eq!(lat1.data(), lat2.data());
        assert_eq!(rec1.data(), rec2.data());
    }

    #[test]
    fn decode_rejects_inconsistent_keep_ids() {
        let p = init_params(&toy_cfg(), 19).unwrap();
        let g = toy_geometry();
        let pos = sincos_embed(&g, 8).unwrap();
        let lat = Tensor::from_rows(3, 8, vec![0.1; 24]).unwrap();
        assert!(decode(&p, DecoderRole::Reconstructor, &lat, &[0, 1], 8, &pos).is_err());
        assert!(decode(&p, DecoderRole::Reconstructor, &lat, &[0, 1, 9], 8, &pos).is_err());
    }
}
