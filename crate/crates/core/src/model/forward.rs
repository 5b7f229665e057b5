use super::{BlockParams, ModelConfig, ModelParams, LN_EPS};
use crate::error::{ensure, Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Token states of the four branches of a quadruple block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchState<T = Var> {
    /// Source self-attention branch.
    pub source: T,
    /// Queries from the target, keys and values from the source.
    pub target_to_source: T,
    /// Queries from the source, keys and values from the target.
    pub source_to_target: T,
    /// Target self-attention branch.
    pub target: T,
}

/// Splits `[b, H, W, C]` images into `[b, N, C*P*P]` patch rows. Patches are
/// taken in row-major grid order and flattened in (row, col, channel) order.
pub fn patch_partition(images: &Tensor, patch: usize) -> Result<Tensor> {
    ensure!(images.rank() == 4, "patch_partition expects [b, H, W, C], got {:?}", images.shape());
    let (b, h, w, c) = (
        images.shape()[0],
        images.shape()[1],
        images.shape()[2],
        images.shape()[3],
    );
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidShape {
            shape: images.shape().to_vec(),
            reason: format!("image is not divisible into {patch}x{patch} patches"),
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let src = images.data();
    let mut data = Vec::with_capacity(images.numel());
    for n in 0..b {
        for pr in 0..gh {
            for pc in 0..gw {
                for r in 0..patch {
                    let row = pr * patch + r;
                    let start = ((n * h + row) * w + pc * patch) * c;
                    data.extend_from_slice(&src[start..start + patch * c]);
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, c * patch * patch], data)
}

fn split_heads(g: &mut Graph, x: Var, n_heads: usize) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let r = g.reshape(x, &[b, n, n_heads, d / n_heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let (b, h, n, dk) = (shape[0], shape[1], shape[2], shape[3]);
    let p = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(p, &[b, n, h * dk])
}

/// Intermediate values of one multi-head attention application.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParts {
    /// Row-stochastic weights `[b, heads, N_q, N_kv]`.
    pub weights: Var,
    /// Per-head values `[b, heads, N_kv, d_k]`.
    pub values: Var,
    /// Weighted values with heads merged, before the output projection: `[b, N_q, d]`.
    pub mixed: Var,
    /// Final output after `W_O`: `[b, N_q, d]`.
    pub output: Var,
}

/// Multi-head attention with queries from `q_tokens` and keys/values from
/// `kv_tokens`, all projected with the same block parameters.
pub fn attention(
    g: &mut Graph,
    q_tokens: Var,
    kv_tokens: Var,
    p: &BlockParams<Var>,
    n_heads: usize,
) -> Result<AttentionParts> {
    let qs = g.value(q_tokens).shape().to_vec();
    let ks = g.value(kv_tokens).shape().to_vec();
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::shape("attention", &qs, &ks));
    }
    let d = qs[2];
    ensure!(n_heads >= 1 && d.is_multiple_of(n_heads), "d_model {d} not divisible by {n_heads} heads");
    let scale = 1.0 / ((d / n_heads) as f64).sqrt();

    let q = g.matmul(q_tokens, p.wq)?;
    let k = g.matmul(kv_tokens, p.wk)?;
    let v = g.matmul(kv_tokens, p.wv)?;
    let q = split_heads(g, q, n_heads)?;
    let k = split_heads(g, k, n_heads)?;
    let values = split_heads(g, v, n_heads)?;

    let kt = g.transpose_last2(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, scale)?;
    let weights = g.softmax_rows(logits)?;
    let heads = g.matmul(weights, values)?;
    let mixed = merge_heads(g, heads)?;
    let output = g.matmul(mixed, p.wo)?;
    Ok(AttentionParts {
        weights,
        values,
        mixed,
        output,
    })
}

/// Multi-head self-attention.
pub fn attn_self(g: &mut Graph, x: Var, p: &BlockParams<Var>, n_heads: usize) -> Result<Var> {
    Ok(attention(g, x, x, p, n_heads)?.output)
}

/// Multi-head cross-attention: queries from `q_tokens`, keys and values from `kv_tokens`.
pub fn attn_cross(
    g: &mut Graph,
    q_tokens: Var,
    kv_tokens: Var,
    p: &BlockParams<Var>,
    n_heads: usize,
) -> Result<Var> {
    Ok(attention(g, q_tokens, kv_tokens, p, n_heads)?.output)
}

/// Attention weight tensor `[b, heads, N_q, N_kv]` for plain tensors.
pub fn attn_weights(
    q_tokens: &Tensor,
    kv_tokens: &Tensor,
    p: &BlockParams<Tensor>,
    n_heads: usize,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let pv = p.map(|t| g.constant(t.clone()));
    let q = g.constant(q_tokens.clone());
    let kv = g.constant(kv_tokens.clone());
    let parts = attention(&mut g, q, kv, &pv, n_heads)?;
    Ok(g.value(parts.weights).clone())
}

/// Affine, GELU, affine.
pub fn mlp(g: &mut Graph, x: Var, p: &BlockParams<Var>) -> Result<Var> {
    let h = g.matmul(x, p.mlp_w1)?;
    let h = g.add(h, p.mlp_b1)?;
    let h = g.gelu(h)?;
    let h = g.matmul(h, p.mlp_w2)?;
    g.add(h, p.mlp_b2)
}

/// One branch: `Z^ = MCA(q, kv) + residual`, `Z = MLP(LN(Z^)) + Z^`, where
/// `q` and `kv` are already layer-normalized.
fn branch(
    g: &mut Graph,
    residual: Var,
    q_normed: Var,
    kv_normed: Var,
    p: &BlockParams<Var>,
    n_heads: usize,
) -> Result<Var> {
    let attn = attn_cross(g, q_normed, kv_normed, p, n_heads)?;
    let mid = g.add(attn, residual)?;
    let normed = g.layer_norm(mid, p.ln2_g, p.ln2_b, LN_EPS)?;
    let out = mlp(g, normed, p)?;
    g.add(out, mid)
}

/// One quadruple block. The cross branches attend between the *self*
/// branches' normalized inputs and keep their own residual streams.
pub fn quadruple_block_forward(
    g: &mut Graph,
    s: &BranchState,
    p: &BlockParams<Var>,
    n_heads: usize,
) -> Result<BranchState> {
    let shape = g.value(s.source).shape().to_vec();
    for v in [s.target_to_source, s.source_to_target, s.target] {
        if g.value(v).shape() != shape.as_slice() {
            return Err(Error::shape("quadruple_block", &shape, g.value(v).shape()));
        }
    }
    let ln_s = g.layer_norm(s.source, p.ln1_g, p.ln1_b, LN_EPS)?;
    let ln_t = g.layer_norm(s.target, p.ln1_g, p.ln1_b, LN_EPS)?;
    Ok(BranchState {
        source: branch(g, s.source, ln_s, ln_s, p, n_heads)?,
        target_to_source: branch(g, s.target_to_source, ln_t, ln_s, p, n_heads)?,
        source_to_target: branch(g, s.source_to_target, ln_s, ln_t, p, n_heads)?,
        target: branch(g, s.target, ln_t, ln_t, p, n_heads)?,
    })
}

/// Linear patch embedding `[b, N, C*P*P] -> [b, N, d]`.
pub fn embed_patches(g: &mut Graph, patches: Var, params: &ModelParams<Var>) -> Result<Var> {
    let e = g.matmul(patches, params.embed_w)?;
    g.add(e, params.embed_b)
}

/// Branch states after embedding and after every block (`L + 1` entries).
pub fn backbone_states(
    g: &mut Graph,
    source_patches: Var,
    target_patches: Var,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
) -> Result<Vec<BranchState>> {
    let (bs, bt) = (g.value(source_patches).shape()[0], g.value(target_patches).shape()[0]);
    if bs != bt {
        return Err(Error::InvalidArgument(format!(
            "source batch has {bs} samples but target batch has {bt}; batches are index-paired"
        )));
    }
    let zs = embed_patches(g, source_patches, params)?;
    let zt = embed_patches(g, target_patches, params)?;
    let mut states = vec![BranchState {
        source: zs,
        target_to_source: zs,
        source_to_target: zt,
        target: zt,
    }];
    for block in &params.blocks {
        let last = *states.last().expect("nonempty");
        states.push(quadruple_block_forward(g, &last, block, cfg.n_heads)?);
    }
    Ok(states)
}

/// Embeds both domains and runs all quadruple blocks.
pub fn backbone_forward(
    g: &mut Graph,
    source_patches: Var,
    target_patches: Var,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
) -> Result<BranchState> {
    let states = backbone_states(g, source_patches, target_patches, params, cfg)?;
    Ok(*states.last().expect("nonempty"))
}

/// Token states of a single self-attention branch after embedding and after
/// every block. Computes exactly what the source/target branch of the full
/// backbone computes, without the other domain.
pub fn self_branch_states(
    g: &mut Graph,
    patches: Var,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
) -> Result<Vec<Var>> {
    let mut z = embed_patches(g, patches, params)?;
    let mut states = vec![z];
    for p in &params.blocks {
        let ln = g.layer_norm(z, p.ln1_g, p.ln1_b, LN_EPS)?;
        z = branch(g, z, ln, ln, p, cfg.n_heads)?;
        states.push(z);
    }
    Ok(states)
}

pub fn self_branch_forward(
    g: &mut Graph,
    patches: Var,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    Ok(*self_branch_states(g, patches, params, cfg)?
        .last()
        .expect("nonempty"))
}

/// Mean-pools tokens and concatenates into the source-dominant
/// `[Z_s | Z_t->s]` and target-dominant `[Z_t | Z_s->t]` representations.
pub fn pool_and_augment(g: &mut Graph, s: &BranchState) -> Result<(Var, Var)> {
    let ps = g.mean_axis(s.source, 1)?;
    let pts = g.mean_axis(s.target_to_source, 1)?;
    let pst = g.mean_axis(s.source_to_target, 1)?;
    let pt = g.mean_axis(s.target, 1)?;
    let src_aug = g.concat(&[ps, pts], 1)?;
    let tgt_aug = g.concat(&[pt, pst], 1)?;
    Ok((src_aug, tgt_aug))
}

/// Two-layer classifier head; returns logits `[b, K]`.
pub fn classify(g: &mut Graph, aug: Var, params: &ModelParams<Var>) -> Result<Var> {
    let width = g.value(aug).last_dim();
    let expected = g.value(params.cls_w1).shape()[0];
    if width != expected {
        return Err(Error::shape("classify", g.value(aug).shape(), g.value(params.cls_w1).shape()));
    }
    let h = g.matmul(aug, params.cls_w1)?;
    let h = g.add(h, params.cls_b1)?;
    let h = g.gelu(h)?;
    let h = g.matmul(h, params.cls_w2)?;
    g.add(h, params.cls_b2)
}
