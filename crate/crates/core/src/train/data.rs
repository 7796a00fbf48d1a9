//! Turns packed dataset records into batches of unified canvases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{PackedInstance, Split};
use crate::derive_seed;
use crate::instance::{reduce_answers, MatrixInstance, TaskStructure};
use crate::render::{render_unified_at, RenderError, RenderLayout};

/// Splits whose rendered canvases fit in this many bytes are rendered once
/// and kept; larger ones are rendered per batch.
pub const CACHE_BUDGET_BYTES: usize = 1 << 30;

/// Seed for answer reduction at `n_a`, shared by training and evaluation so
/// both see the same reduced instances.
pub fn reduction_seed(seed: u64, n_a: usize) -> u64 {
    derive_seed(seed, &[TAG_REDUCE, n_a as u64])
}

const TAG_REDUCE: u64 = 3;

/// Record `i` of `split` with its answers reduced to `n_a`. Records already
/// at `n_a` are returned unchanged.
pub fn reduced_instance(item: &PackedInstance, split: Split, i: usize, n_a: usize, reduce_seed: u64) -> MatrixInstance {
    let full = item.to_instance();
    if full.n_a() == n_a {
        return full;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(reduce_seed, &[split.index(), i as u64]));
    reduce_answers(&full, n_a, &mut rng).expect("target n_a checked against the dataset")
}

/// One split seen at a fixed answer count and canvas size. Answer
/// reduction is seeded per instance, so every pass sees the same panels.
pub struct SplitView {
    pub split: Split,
    items: Vec<PackedInstance>,
    structure: TaskStructure,
    pub canvas: (usize, usize),
    reduce_seed: u64,
    layout: RenderLayout,
    cache: Option<Vec<u8>>,
    labels: Vec<usize>,
}

/// A batch ready for the network.
pub struct Batch {
    pub input: Vec<f32>,
    pub labels: Vec<usize>,
    pub rules: Vec<Vec<u8>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rule_refs(&self) -> Vec<&[u8]> {
        self.rules.iter().map(|r| r.as_slice()).collect()
    }
}

impl SplitView {
    /// `structure` is the stored structure; `n_a` may be smaller, in which
    /// case answers are reduced with `reduce_seed`.
    pub fn new(
        split: Split,
        items: Vec<PackedInstance>,
        structure: TaskStructure,
        n_a: usize,
        canvas: (usize, usize),
        reduce_seed: u64,
    ) -> Result<Self, RenderError> {
        let mut view = SplitView {
            split,
            items,
            structure: structure.with_n_a(n_a),
            canvas,
            reduce_seed,
            layout: RenderLayout::default(),
            cache: None,
            labels: Vec::new(),
        };
        view.labels = (0..view.items.len())
            .into_par_iter()
            .map(|i| if view.items[i].n_a == n_a { view.items[i].correct } else { view.instance(i).correct })
            .collect();
        if view.items.is_empty() {
            return Ok(view);
        }
        let pix = canvas.0 * canvas.1;
        if view.items.len() * pix <= CACHE_BUDGET_BYTES {
            let rendered: Result<Vec<Vec<u8>>, RenderError> =
                (0..view.items.len()).into_par_iter().map(|i| view.render(i)).collect();
            view.cache = Some(rendered?.concat());
        } else {
            view.render(0)?;
        }
        Ok(view)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_a(&self) -> usize {
        self.structure.n_a
    }

    /// Instance `i` after answer reduction.
    pub fn instance(&self, i: usize) -> MatrixInstance {
        reduced_instance(&self.items[i], self.split, i, self.structure.n_a, self.reduce_seed)
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn rules(&self, i: usize) -> &[u8] {
        &self.items[i].rules
    }

    fn render(&self, i: usize) -> Result<Vec<u8>, RenderError> {
        let inst = self.instance(i);
        Ok(render_unified_at(&inst, &self.structure, &self.layout, self.canvas)?.canvas.data)
    }

    /// Canvas bytes of instance `i`.
    pub fn canvas_bytes(&self, i: usize) -> Vec<u8> {
        let pix = self.canvas.0 * self.canvas.1;
        match &self.cache {
            Some(c) => c[i * pix..(i + 1) * pix].to_vec(),
            None => self.render(i).expect("first instance rendered at construction"),
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let pix = self.canvas.0 * self.canvas.1;
        let mut input = vec![0.0f32; indices.len() * pix];
        input.par_chunks_mut(pix).zip(indices.par_iter()).for_each(|(dst, &i)| {
            let owned;
            let src = match &self.cache {
                Some(c) => &c[i * pix..(i + 1) * pix],
                None => {
                    owned = self.canvas_bytes(i);
                    &owned[..]
                }
            };
            dst.iter_mut().zip(src).for_each(|(d, &b)| *d = b as f32 / 255.0);
        });
        Batch {
            input,
            labels: indices.iter().map(|&i| self.label(i)).collect(),
            rules: indices.iter().map(|&i| self.rules(i).to_vec()).collect(),
        }
    }
}

/// Consecutive index batches of `size`; a trailing singleton joins the
/// previous batch so batch statistics are never taken over one sample.
pub fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size.max(1)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_tail_is_merged() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(batches(&order, 3).len(), 3);
        assert_eq!(batches(&[0], 4), vec![vec![0]]);
    }
}
