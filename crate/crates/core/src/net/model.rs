use rayon::prelude::*;

use super::ops::{
    accumulate_row_sums, add_row_bias, gelu, gelu_grad, gemm_nn, gemm_nt, gemm_tn, layer_norm, layer_norm_backward,
    ConvGeom, LnCache, Real, BN_EPS, BN_MOMENTUM,
};
use super::{BlockLayer, HeadLayer, NetError, Network, StemLayer, AUX_HIDDEN};

/// Fixed number of gradient partitions. Partials are summed in index order,
/// so results do not depend on the thread count.
const GRAD_PARTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batched network outputs, row-major by sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Outputs<T> {
    pub batch: usize,
    pub n_a: usize,
    pub rule_dim: usize,
    pub d: usize,
    pub answer: Vec<T>,
    pub rule: Vec<T>,
    pub pooled: Vec<T>,
}

impl<T: Real> Outputs<T> {
    pub fn answer_row(&self, i: usize) -> &[T] {
        &self.answer[i * self.n_a..(i + 1) * self.n_a]
    }

    pub fn rule_row(&self, i: usize) -> &[T] {
        &self.rule[i * self.rule_dim..(i + 1) * self.rule_dim]
    }

    pub fn pooled_row(&self, i: usize) -> &[T] {
        &self.pooled[i * self.d..(i + 1) * self.d]
    }

    /// Index of the largest answer logit, first on ties.
    pub fn predicted(&self, i: usize) -> usize {
        let row = self.answer_row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        best
    }
}

/// Tokens of one sample, channel-major: `data[(c * rows + y) * cols + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T> {
    pub d: usize,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy> TokenGrid<T> {
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.rows + y) * self.cols + x]
    }
}

struct StemCache<T> {
    xhat: Vec<Vec<T>>,
    out: Vec<Vec<T>>,
    rstd: Vec<T>,
}

struct BlockCache<T> {
    ln1: LnCache<T>,
    v: Vec<T>,
    u: Vec<T>,
    cat: Vec<T>,
    ln2: LnCache<T>,
    n: Vec<T>,
    h1: Vec<T>,
    a: Vec<T>,
}

struct HeadCache<T> {
    ln: LnCache<T>,
    pooled: Vec<T>,
    g1: Vec<T>,
    a1: Vec<T>,
}

struct SampleCache<T> {
    blocks: Vec<BlockCache<T>>,
    head: HeadCache<T>,
}

/// Activations kept by a training-mode forward pass.
pub struct Tape<T> {
    input: Vec<T>,
    batch: usize,
    stem: Vec<StemCache<T>>,
    samples: Vec<SampleCache<T>>,
}

impl<T> Tape<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl<T: Real> Tape<T> {
    /// Which stem activations are positive; changes mark ReLU kinks.
    pub(crate) fn relu_pattern(&self) -> Vec<bool> {
        self.stem.iter().flat_map(|s| s.out.iter().flatten().map(|&v| v > T::zero())).collect()
    }
}

struct Grid {
    d: usize,
    rows: usize,
    cols: usize,
    segments: usize,
}

impl Grid {
    fn n(&self) -> usize {
        self.rows * self.cols
    }

    fn local_conv(&self) -> ConvGeom {
        ConvGeom { c_in: self.d, h: self.rows, w: self.cols, kernel: 5, stride: 1, pad: 2 }
    }
}

fn p<'a, T>(params: &'a [T], r: &std::ops::Range<usize>) -> &'a [T] {
    &params[r.clone()]
}

/// Splits `0..batch` into at most `GRAD_PARTS` contiguous ranges, runs `f`
/// per sample with a partial gradient buffer, and sums partials in order.
fn partitioned<T: Real, R: Send, F>(batch: usize, nparams: usize, f: F) -> (Vec<T>, Vec<R>)
where
    F: Fn(usize, &mut [T]) -> R + Sync,
{
    let parts = GRAD_PARTS.min(batch).max(1);
    let bounds: Vec<(usize, usize)> = (0..parts).map(|k| (k * batch / parts, (k + 1) * batch / parts)).collect();
    let results: Vec<(Vec<T>, Vec<R>)> = bounds
        .par_iter()
        .map(|&(lo, hi)| {
            let mut g = vec![T::zero(); nparams];
            let outs = (lo..hi).map(|i| f(i, &mut g)).collect();
            (g, outs)
        })
        .collect();
    let mut total = vec![T::zero(); nparams];
    let mut outs = Vec::with_capacity(batch);
    for (g, o) in results {
        total.iter_mut().zip(&g).for_each(|(t, &v)| *t += v);
        outs.extend(o);
    }
    (total, outs)
}

impl<T: Real> Network<T> {
    fn grid(&self) -> Grid {
        let (rows, cols) = self.config.grid();
        Grid { d: self.config.d(), rows, cols, segments: self.config.segments }
    }

    fn check_input(&self, input: &[T], batch: usize) -> Result<(), NetError> {
        let want = batch * self.config.input_h * self.config.input_w;
        if input.len() != want {
            return Err(NetError::BatchLength { got: input.len(), want });
        }
        Ok(())
    }

    /// Eval-mode forward; samples are processed independently.
    pub fn forward_eval(&self, input: &[T], batch: usize) -> Result<Outputs<T>, NetError> {
        self.check_input(input, batch)?;
        let pix = self.config.input_h * self.config.input_w;
        let per: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..batch)
            .into_par_iter()
            .map(|i| {
                let mut x = input[i * pix..(i + 1) * pix].to_vec();
                for (layer, (mean, var)) in self.layout.stem.iter().zip(&self.running) {
                    x = self.stem_eval(layer, &x, mean, var);
                }
                for block in &self.layout.blocks {
                    x = block_forward(&self.params, block, &self.grid(), &x).0;
                }
                let (ans, rule, head) = head_forward(&self.params, &self.layout.head, &self.config, &self.grid(), &x);
                (ans, rule, head.pooled)
            })
            .collect();
        Ok(self.collect_outputs(batch, per))
    }

    fn collect_outputs(&self, batch: usize, per: Vec<(Vec<T>, Vec<T>, Vec<T>)>) -> Outputs<T> {
        let mut out = Outputs {
            batch,
            n_a: self.config.n_a,
            rule_dim: self.config.rule_dim,
            d: self.config.d(),
            answer: Vec::with_capacity(batch * self.config.n_a),
            rule: Vec::with_capacity(batch * self.config.rule_dim),
            pooled: Vec::with_capacity(batch * self.config.d()),
        };
        for (a, r, z) in per {
            out.answer.extend(a);
            out.rule.extend(r);
            out.pooled.extend(z);
        }
        out
    }

    fn stem_eval(&self, layer: &StemLayer, x: &[T], mean: &[T], var: &[T]) -> Vec<T> {
        let mut y = layer.geom.forward(x, p(&self.params, &layer.weight), p(&self.params, &layer.bias), layer.c_out);
        let n = layer.geom.out_h() * layer.geom.out_w();
        let (gamma, beta) = (p(&self.params, &layer.gamma), p(&self.params, &layer.beta));
        for (c, row) in y.chunks_exact_mut(n).enumerate() {
            let scale = gamma[c] / (var[c] + T::lit(BN_EPS)).sqrt();
            let shift = beta[c] - mean[c] * scale;
            row.iter_mut().for_each(|v| *v = (*v * scale + shift).max(T::zero()));
        }
        y
    }

    /// Eval-mode stem on one image, using the running batch-norm statistics.
    pub fn stem_forward(&self, image: &[T]) -> Result<TokenGrid<T>, NetError> {
        self.check_input(image, 1)?;
        let mut x = image.to_vec();
        for (layer, (mean, var)) in self.layout.stem.iter().zip(&self.running) {
            x = self.stem_eval(layer, &x, mean, var);
        }
        let g = self.grid();
        Ok(TokenGrid { d: g.d, rows: g.rows, cols: g.cols, data: x })
    }

    fn block_layer(&self, block: usize, z: &TokenGrid<T>) -> &BlockLayer {
        let g = self.grid();
        assert_eq!((z.d, z.rows, z.cols), (g.d, g.rows, g.cols), "token grid does not match the model");
        &self.layout.blocks[block]
    }

    /// `TokenMixer(Norm(z)) + z` for block `block`.
    pub fn token_mixer_forward(&self, block: usize, z: &TokenGrid<T>) -> TokenGrid<T> {
        let b = self.block_layer(block, z);
        TokenGrid { d: z.d, rows: z.rows, cols: z.cols, data: token_mix(&self.params, b, &self.grid(), &z.data).0 }
    }

    /// `ChannelMixer(Norm(z)) + z` for block `block`.
    pub fn channel_mixer_forward(&self, block: usize, z: &TokenGrid<T>) -> TokenGrid<T> {
        let b = self.block_layer(block, z);
        TokenGrid { d: z.d, rows: z.rows, cols: z.cols, data: channel_mix(&self.params, b, &self.grid(), z.data.clone()).0 }
    }

    /// Both mixers of block `block`.
    pub fn block_forward(&self, block: usize, z: &TokenGrid<T>) -> TokenGrid<T> {
        let b = self.block_layer(block, z);
        TokenGrid { d: z.d, rows: z.rows, cols: z.cols, data: block_forward(&self.params, b, &self.grid(), &z.data).0 }
    }

    /// Forward pass in either mode. Train mode normalises with batch
    /// statistics, updates running statistics, and returns a tape for
    /// [`Network::backward`].
    pub fn forward(&mut self, input: &[T], batch: usize, mode: Mode) -> Result<(Outputs<T>, Option<Tape<T>>), NetError> {
        match mode {
            Mode::Eval => Ok((self.forward_eval(input, batch)?, None)),
            Mode::Train => {
                let (o, t) = self.forward_train(input, batch)?;
                Ok((o, Some(t)))
            }
        }
    }

    pub fn forward_train(&mut self, input: &[T], batch: usize) -> Result<(Outputs<T>, Tape<T>), NetError> {
        self.check_input(input, batch)?;
        let pix = self.config.input_h * self.config.input_w;
        let mut stem_caches = Vec::with_capacity(self.layout.stem.len());
        for s in 0..self.layout.stem.len() {
            let layer = &self.layout.stem[s];
            let prev: Option<&StemCache<T>> = stem_caches.last();
            let params = &self.params;
            let ys: Vec<Vec<T>> = (0..batch)
                .into_par_iter()
                .map(|i| {
                    let x = match prev {
                        Some(c) => &c.out[i][..],
                        None => &input[i * pix..(i + 1) * pix],
                    };
                    layer.geom.forward(x, p(params, &layer.weight), p(params, &layer.bias), layer.c_out)
                })
                .collect();
            let n = layer.geom.out_h() * layer.geom.out_w();
            let count = T::from_usize(batch * n).unwrap();
            let mut mean = vec![T::zero(); layer.c_out];
            for y in &ys {
                for (c, row) in y.chunks_exact(n).enumerate() {
                    mean[c] += row.iter().copied().sum::<T>();
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / count);
            let mut var = vec![T::zero(); layer.c_out];
            for y in &ys {
                for (c, row) in y.chunks_exact(n).enumerate() {
                    var[c] += row.iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<T>();
                }
            }
            var.iter_mut().for_each(|v| *v = *v / count);
            let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(BN_EPS)).sqrt()).collect();
            let (gamma, beta) = (p(params, &layer.gamma), p(params, &layer.beta));
            let (xhat, out): (Vec<Vec<T>>, Vec<Vec<T>>) = ys
                .into_par_iter()
                .map(|mut y| {
                    let mut o = vec![T::zero(); y.len()];
                    for c in 0..layer.c_out {
                        for (h, ov) in y[c * n..(c + 1) * n].iter_mut().zip(&mut o[c * n..(c + 1) * n]) {
                            *h = (*h - mean[c]) * rstd[c];
                            *ov = (gamma[c] * *h + beta[c]).max(T::zero());
                        }
                    }
                    (y, o)
                })
                .unzip();
            let m = T::lit(BN_MOMENTUM);
            let unbias = if batch * n > 1 { count / (count - T::one()) } else { T::one() };
            let (rm, rv) = &mut self.running[s];
            for c in 0..layer.c_out {
                rm[c] = (T::one() - m) * rm[c] + m * mean[c];
                rv[c] = (T::one() - m) * rv[c] + m * var[c] * unbias;
            }
            stem_caches.push(StemCache { xhat, out, rstd });
        }
        let grid = self.grid();
        let params = &self.params;
        let last = stem_caches.last().expect("stem has at least one stage");
        let per: Vec<((Vec<T>, Vec<T>, Vec<T>), SampleCache<T>)> = (0..batch)
            .into_par_iter()
            .map(|i| {
                let mut x = last.out[i].clone();
                let mut blocks = Vec::with_capacity(self.layout.blocks.len());
                for block in &self.layout.blocks {
                    let (z, cache) = block_forward(params, block, &grid, &x);
                    blocks.push(cache);
                    x = z;
                }
                let (ans, rule, head) = head_forward(params, &self.layout.head, &self.config, &grid, &x);
                ((ans, rule, head.pooled.clone()), SampleCache { blocks, head })
            })
            .collect();
        let (outs, samples): (Vec<_>, Vec<_>) = per.into_iter().unzip();
        let tape = Tape { input: input.to_vec(), batch, stem: stem_caches, samples };
        Ok((self.collect_outputs(batch, outs), tape))
    }

    /// Gradients of a loss with respect to every parameter, given the loss
    /// gradients with respect to the answer and rule logits of the tape's
    /// forward pass.
    pub fn backward(&self, tape: &Tape<T>, d_answer: &[T], d_rule: &[T]) -> Vec<T> {
        let batch = tape.batch;
        let (n_a, rd) = (self.config.n_a, self.config.rule_dim);
        assert_eq!(d_answer.len(), batch * n_a, "answer gradient shape");
        assert_eq!(d_rule.len(), batch * rd, "rule gradient shape");
        let grid = self.grid();
        let params = &self.params;
        let nparams = self.layout.total;
        let (mut grads, mut dz) = partitioned(batch, nparams, |i, g| {
            let cache = &tape.samples[i];
            let mut dx = head_backward(
                params,
                &self.layout.head,
                &grid,
                &cache.head,
                &d_answer[i * n_a..(i + 1) * n_a],
                &d_rule[i * rd..(i + 1) * rd],
                g,
            );
            for (block, bc) in self.layout.blocks.iter().zip(&cache.blocks).rev() {
                dx = block_backward(params, block, &grid, bc, &dx, g);
            }
            dx
        });
        let pix = self.config.input_h * self.config.input_w;
        for s in (0..self.layout.stem.len()).rev() {
            let layer = &self.layout.stem[s];
            let cache = &tape.stem[s];
            let n = layer.geom.out_h() * layer.geom.out_w();
            let gamma = p(params, &layer.gamma);
            let masked: Vec<Vec<T>> = dz
                .into_par_iter()
                .zip(&cache.out)
                .map(|(mut g, o)| {
                    g.iter_mut().zip(o).for_each(|(gv, &ov)| {
                        if ov <= T::zero() {
                            *gv = T::zero();
                        }
                    });
                    g
                })
                .collect();
            let mut sum_g = vec![T::zero(); layer.c_out];
            let mut sum_gx = vec![T::zero(); layer.c_out];
            for (g, xh) in masked.iter().zip(&cache.xhat) {
                for c in 0..layer.c_out {
                    for (&gv, &hv) in g[c * n..(c + 1) * n].iter().zip(&xh[c * n..(c + 1) * n]) {
                        sum_g[c] += gv;
                        sum_gx[c] += gv * hv;
                    }
                }
            }
            for c in 0..layer.c_out {
                grads[layer.gamma.start + c] += sum_gx[c];
                grads[layer.beta.start + c] += sum_g[c];
            }
            let count = T::from_usize(batch * n).unwrap();
            let dy: Vec<Vec<T>> = masked
                .into_par_iter()
                .zip(&cache.xhat)
                .map(|(mut g, xh)| {
                    for c in 0..layer.c_out {
                        let k = gamma[c] * cache.rstd[c] / count;
                        for (gv, &hv) in g[c * n..(c + 1) * n].iter_mut().zip(&xh[c * n..(c + 1) * n]) {
                            *gv = k * (count * *gv - sum_g[c] - hv * sum_gx[c]);
                        }
                    }
                    g
                })
                .collect();
            let want_dx = s > 0;
            let (g, dxs) = partitioned(batch, nparams, |i, g| {
                let x = if s > 0 { &tape.stem[s - 1].out[i][..] } else { &tape.input[i * pix..(i + 1) * pix] };
                let (head, tail) = g.split_at_mut(layer.bias.start);
                layer.geom.backward(
                    x,
                    p(params, &layer.weight),
                    &dy[i],
                    layer.c_out,
                    &mut head[layer.weight.clone()],
                    &mut tail[..layer.c_out],
                    want_dx,
                )
            });
            grads.iter_mut().zip(&g).for_each(|(t, &v)| *t += v);
            dz = dxs.into_iter().map(|d| d.unwrap_or_default()).collect();
        }
        grads
    }
}

struct TokenMixCache<T> {
    ln1: LnCache<T>,
    v: Vec<T>,
    u: Vec<T>,
    cat: Vec<T>,
}

struct ChannelMixCache<T> {
    ln2: LnCache<T>,
    n: Vec<T>,
    h1: Vec<T>,
    a: Vec<T>,
}

fn token_mix<T: Real>(params: &[T], b: &BlockLayer, grid: &Grid, x: &[T]) -> (Vec<T>, TokenMixCache<T>) {
    let (d, n) = (grid.d, grid.n());
    let (v, ln1) = layer_norm(x, d, n, p(params, &b.norm1_g), p(params, &b.norm1_b));
    let mut u = grid.local_conv().forward(&v, p(params, &b.local_w), p(params, &b.local_b), d);
    u.iter_mut().zip(&v).for_each(|(a, &b)| *a += b);

    let mut cat = vec![T::zero(); 3 * d * n];
    let (ph, rest) = cat.split_at_mut(d * n);
    let (pw, pc) = rest.split_at_mut(d * n);
    height_forward(grid, p(params, &b.height_w), p(params, &b.height_b), &u, ph);
    width_forward(grid, p(params, &b.width_w), p(params, &b.width_b), &u, pw);
    gemm_nn(d, d, n, p(params, &b.chan_w), &u, pc, false);
    add_row_bias(pc, p(params, &b.chan_b), n);

    let mut zs = x.to_vec();
    gemm_nn(d, 3 * d, n, p(params, &b.fuse_w), &cat, &mut zs, true);
    add_row_bias(&mut zs, p(params, &b.fuse_b), n);
    (zs, TokenMixCache { ln1, v, u, cat })
}

fn channel_mix<T: Real>(params: &[T], b: &BlockLayer, grid: &Grid, zs: Vec<T>) -> (Vec<T>, ChannelMixCache<T>) {
    let (d, n) = (grid.d, grid.n());
    let (nrm, ln2) = layer_norm(&zs, d, n, p(params, &b.norm2_g), p(params, &b.norm2_b));
    let kd = b.b1.len();
    let mut h1 = vec![T::zero(); kd * n];
    gemm_nn(kd, d, n, p(params, &b.w1), &nrm, &mut h1, false);
    add_row_bias(&mut h1, p(params, &b.b1), n);
    let a: Vec<T> = h1.iter().map(|&v| gelu(v)).collect();
    let mut z = zs;
    gemm_nn(d, kd, n, p(params, &b.w2), &a, &mut z, true);
    add_row_bias(&mut z, p(params, &b.b2), n);
    (z, ChannelMixCache { ln2, n: nrm, h1, a })
}

fn block_forward<T: Real>(params: &[T], b: &BlockLayer, grid: &Grid, x: &[T]) -> (Vec<T>, BlockCache<T>) {
    let (zs, t) = token_mix(params, b, grid, x);
    let (z, c) = channel_mix(params, b, grid, zs);
    (z, BlockCache { ln1: t.ln1, v: t.v, u: t.u, cat: t.cat, ln2: c.ln2, n: c.n, h1: c.h1, a: c.a })
}

fn block_backward<T: Real>(
    params: &[T],
    b: &BlockLayer,
    grid: &Grid,
    c: &BlockCache<T>,
    dz: &[T],
    g: &mut [T],
) -> Vec<T> {
    let (d, n) = (grid.d, grid.n());
    let kd = b.b1.len();
    // channel mixer
    gemm_nt(d, n, kd, dz, &c.a, &mut g[b.w2.clone()], true);
    accumulate_row_sums(&mut g[b.b2.clone()], dz, n);
    let mut dh = vec![T::zero(); kd * n];
    gemm_tn(kd, d, n, p(params, &b.w2), dz, &mut dh, false);
    dh.iter_mut().zip(&c.h1).for_each(|(v, &h)| *v *= gelu_grad(h));
    gemm_nt(kd, n, d, &dh, &c.n, &mut g[b.w1.clone()], true);
    accumulate_row_sums(&mut g[b.b1.clone()], &dh, n);
    let mut dn = vec![T::zero(); d * n];
    gemm_tn(d, kd, n, p(params, &b.w1), &dh, &mut dn, false);
    let (dg, db) = two_mut(g, &b.norm2_g, &b.norm2_b);
    let dln = layer_norm_backward(&c.ln2, &dn, d, n, p(params, &b.norm2_g), dg, db);
    let dzs: Vec<T> = dz.iter().zip(&dln).map(|(&a, &b)| a + b).collect();

    // token mixer
    gemm_nt(d, n, 3 * d, &dzs, &c.cat, &mut g[b.fuse_w.clone()], true);
    accumulate_row_sums(&mut g[b.fuse_b.clone()], &dzs, n);
    let mut dcat = vec![T::zero(); 3 * d * n];
    gemm_tn(3 * d, d, n, p(params, &b.fuse_w), &dzs, &mut dcat, false);
    let (dph, rest) = dcat.split_at(d * n);
    let (dpw, dpc) = rest.split_at(d * n);

    let mut du = vec![T::zero(); d * n];
    gemm_nt(d, n, d, dpc, &c.u, &mut g[b.chan_w.clone()], true);
    accumulate_row_sums(&mut g[b.chan_b.clone()], dpc, n);
    gemm_tn(d, d, n, p(params, &b.chan_w), dpc, &mut du, true);
    let (gw, gb) = two_mut(g, &b.height_w, &b.height_b);
    height_backward(grid, p(params, &b.height_w), &c.u, dph, gw, gb, &mut du);
    let (gw, gb) = two_mut(g, &b.width_w, &b.width_b);
    width_backward(grid, p(params, &b.width_w), &c.u, dpw, gw, gb, &mut du);

    let (gw, gb) = two_mut(g, &b.local_w, &b.local_b);
    let mut dv = grid
        .local_conv()
        .backward(&c.v, p(params, &b.local_w), &du, d, gw, gb, true)
        .expect("dx requested");
    dv.iter_mut().zip(&du).for_each(|(a, &b)| *a += b);
    let (dg, db) = two_mut(g, &b.norm1_g, &b.norm1_b);
    let dx1 = layer_norm_backward(&c.ln1, &dv, d, n, p(params, &b.norm1_g), dg, db);
    dzs.iter().zip(&dx1).map(|(&a, &b)| a + b).collect()
}

/// Two disjoint mutable sub-slices of a gradient buffer; `a` precedes `b`.
fn two_mut<'a, T>(g: &'a mut [T], a: &std::ops::Range<usize>, b: &std::ops::Range<usize>) -> (&'a mut [T], &'a mut [T]) {
    assert!(a.end <= b.start);
    let (lo, hi) = g.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

/// For each channel group, `out = W * U_e + b` with `U_e` viewed as
/// `(S * rows) x cols`.
fn height_forward<T: Real>(grid: &Grid, w: &[T], bias: &[T], u: &[T], out: &mut [T]) {
    let m = grid.segments * grid.rows;
    let blk = grid.segments * grid.n();
    for (ue, oe) in u.chunks_exact(blk).zip(out.chunks_exact_mut(blk)) {
        gemm_nn(m, m, grid.cols, w, ue, oe, false);
        add_row_bias(oe, bias, grid.cols);
    }
}

fn height_backward<T: Real>(grid: &Grid, w: &[T], u: &[T], dout: &[T], gw: &mut [T], gb: &mut [T], du: &mut [T]) {
    let m = grid.segments * grid.rows;
    let blk = grid.segments * grid.n();
    for ((ue, de), due) in u.chunks_exact(blk).zip(dout.chunks_exact(blk)).zip(du.chunks_exact_mut(blk)) {
        gemm_nt(m, grid.cols, m, de, ue, gw, true);
        accumulate_row_sums(gb, de, grid.cols);
        gemm_tn(m, m, grid.cols, w, de, due, true);
    }
}

/// Gathers group `e` into a `rows x (S * cols)` matrix.
fn width_gather<T: Real>(grid: &Grid, src: &[T], dst: &mut [T]) {
    let (s, r, c) = (grid.segments, grid.rows, grid.cols);
    for seg in 0..s {
        for h in 0..r {
            dst[h * s * c + seg * c..][..c].copy_from_slice(&src[seg * r * c + h * c..][..c]);
        }
    }
}

fn width_scatter_add<T: Real>(grid: &Grid, src: &[T], dst: &mut [T]) {
    let (s, r, c) = (grid.segments, grid.rows, grid.cols);
    for seg in 0..s {
        for h in 0..r {
            let d = &mut dst[seg * r * c + h * c..][..c];
            d.iter_mut().zip(&src[h * s * c + seg * c..][..c]).for_each(|(a, &b)| *a += b);
        }
    }
}

fn width_forward<T: Real>(grid: &Grid, w: &[T], bias: &[T], u: &[T], out: &mut [T]) {
    let m = grid.segments * grid.cols;
    let blk = grid.segments * grid.n();
    let mut t = vec![T::zero(); blk];
    let mut y = vec![T::zero(); blk];
    for (ue, oe) in u.chunks_exact(blk).zip(out.chunks_exact_mut(blk)) {
        width_gather(grid, ue, &mut t);
        gemm_nt(grid.rows, m, m, &t, w, &mut y, false);
        for row in y.chunks_exact_mut(m) {
            row.iter_mut().zip(bias).for_each(|(v, &b)| *v += b);
        }
        oe.fill(T::zero());
        width_scatter_add(grid, &y, oe);
    }
}

fn width_backward<T: Real>(grid: &Grid, w: &[T], u: &[T], dout: &[T], gw: &mut [T], gb: &mut [T], du: &mut [T]) {
    let m = grid.segments * grid.cols;
    let blk = grid.segments * grid.n();
    let mut t = vec![T::zero(); blk];
    let mut dy = vec![T::zero(); blk];
    let mut dt = vec![T::zero(); blk];
    for ((ue, de), due) in u.chunks_exact(blk).zip(dout.chunks_exact(blk)).zip(du.chunks_exact_mut(blk)) {
        width_gather(grid, ue, &mut t);
        width_gather(grid, de, &mut dy);
        gemm_tn(m, grid.rows, m, &dy, &t, gw, true);
        for row in dy.chunks_exact(m) {
            gb.iter_mut().zip(row).for_each(|(g, &v)| *g += v);
        }
        gemm_nn(grid.rows, m, m, &dy, w, &mut dt, false);
        width_scatter_add(grid, &dt, due);
    }
}

fn matvec<T: Real>(w: &[T], bias: &[T], x: &[T]) -> Vec<T> {
    let k = x.len();
    bias.iter()
        .zip(w.chunks_exact(k))
        .map(|(&b, row)| b + row.iter().zip(x).map(|(&a, &c)| a * c).sum::<T>())
        .collect()
}

/// `gw += dy x^T`, `gb += dy`, returns `W^T dy`.
fn matvec_backward<T: Real>(w: &[T], x: &[T], dy: &[T], gw: &mut [T], gb: &mut [T]) -> Vec<T> {
    let k = x.len();
    let mut dx = vec![T::zero(); k];
    for ((row, grow), &d) in w.chunks_exact(k).zip(gw.chunks_exact_mut(k)).zip(dy) {
        for j in 0..k {
            grow[j] += d * x[j];
            dx[j] += d * row[j];
        }
    }
    gb.iter_mut().zip(dy).for_each(|(g, &d)| *g += d);
    dx
}

fn head_forward<T: Real>(
    params: &[T],
    h: &HeadLayer,
    config: &super::ModelConfig,
    grid: &Grid,
    z: &[T],
) -> (Vec<T>, Vec<T>, HeadCache<T>) {
    let (d, n) = (grid.d, grid.n());
    let (y, ln) = layer_norm(z, d, n, p(params, &h.norm_g), p(params, &h.norm_b));
    let inv = T::one() / T::from_usize(n).unwrap();
    let pooled: Vec<T> = y.chunks_exact(n).map(|row| row.iter().copied().sum::<T>() * inv).collect();
    let answer = matvec(p(params, &h.answer_w), p(params, &h.answer_b), &pooled);
    debug_assert_eq!(answer.len(), config.n_a);
    let g1 = matvec(p(params, &h.aux1_w), p(params, &h.aux1_b), &pooled);
    let a1: Vec<T> = g1.iter().map(|&v| gelu(v)).collect();
    let rule = matvec(p(params, &h.aux2_w), p(params, &h.aux2_b), &a1);
    (answer, rule, HeadCache { ln, pooled, g1, a1 })
}

fn head_backward<T: Real>(
    params: &[T],
    h: &HeadLayer,
    grid: &Grid,
    c: &HeadCache<T>,
    d_answer: &[T],
    d_rule: &[T],
    g: &mut [T],
) -> Vec<T> {
    let (d, n) = (grid.d, grid.n());
    let (gw, gb) = two_mut(g, &h.aux2_w, &h.aux2_b);
    let mut da1 = matvec_backward(p(params, &h.aux2_w), &c.a1, d_rule, gw, gb);
    debug_assert_eq!(da1.len(), AUX_HIDDEN);
    da1.iter_mut().zip(&c.g1).for_each(|(v, &x)| *v *= gelu_grad(x));
    let (gw, gb) = two_mut(g, &h.aux1_w, &h.aux1_b);
    let dp_aux = matvec_backward(p(params, &h.aux1_w), &c.pooled, &da1, gw, gb);
    let (gw, gb) = two_mut(g, &h.answer_w, &h.answer_b);
    let dp_ans = matvec_backward(p(params, &h.answer_w), &c.pooled, d_answer, gw, gb);
    let inv = T::one() / T::from_usize(n).unwrap();
    let mut dy = vec![T::zero(); d * n];
    for (ch, row) in dy.chunks_exact_mut(n).enumerate() {
        row.fill((dp_aux[ch] + dp_ans[ch]) * inv);
    }
    let (dg, db) = two_mut(g, &h.norm_g, &h.norm_b);
    layer_norm_backward(&c.ln, &dy, d, n, p(params, &h.norm_g), dg, db)
}
