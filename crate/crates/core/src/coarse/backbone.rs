//! 18-layer residual backbone: an input stem, four stages of two basic blocks
//! with widths `w, 2w, 4w, 8w`, and global average pooling.

use pour_nn::{BatchNorm, Conv2d, ForwardCtx, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::sim::Observation;

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    down: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let down = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(store, &format!("{name}.down"), cin, cout, 1, stride, 0, false, rng),
                BatchNorm::new(store, &format!("{name}.down_bn"), cout),
            )
        });
        BasicBlock {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, stride, 1, false, rng),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), cout),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), cout),
            down,
        }
    }

    fn forward<'g>(&self, g: &'g Graph, s: &ParamStore, x: Var<'g>, ctx: &mut ForwardCtx) -> Var<'g> {
        let y = self.bn1.forward(g, s, self.conv1.forward(g, s, x), ctx).relu();
        let y = self.bn2.forward(g, s, self.conv2.forward(g, s, y), ctx);
        let skip = match &self.down {
            Some((conv, bn)) => bn.forward(g, s, conv.forward(g, s, x), ctx),
            None => x,
        };
        y.add(skip).relu()
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Conv2d,
    stem_bn: BatchNorm,
    blocks: Vec<BasicBlock>,
    pub embed_dim: usize,
}

impl Backbone {
    /// Parameters are registered under `stem.*` and `layer{1..4}.*`.
    pub fn new(store: &mut ParamStore, width: usize, image_size: usize, rng: &mut impl Rng) -> Self {
        // larger renders get a strided stem so stage 1 always sees ~32 px
        let (k, stride, pad) = match image_size {
            0..=40 => (3, 1, 1),
            41..=80 => (5, 2, 2),
            _ => (7, 4, 3),
        };
        let stem = Conv2d::new(store, "stem.conv", 3, width, k, stride, pad, false, rng);
        let stem_bn = BatchNorm::new(store, "stem.bn", width);
        let mut blocks = Vec::new();
        let mut cin = width;
        for stage in 0..4 {
            let cout = width << stage;
            for b in 0..2 {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(store, &format!("layer{}.{b}", stage + 1), cin, cout, stride, rng));
                cin = cout;
            }
        }
        Backbone { stem, stem_bn, blocks, embed_dim: cin }
    }

    /// `[B, 3, S, S]` to `[B, embed_dim]`.
    pub fn forward<'g>(&self, g: &'g Graph, s: &ParamStore, x: Var<'g>, ctx: &mut ForwardCtx) -> Var<'g> {
        let mut y = self.stem_bn.forward(g, s, self.stem.forward(g, s, x), ctx).relu();
        for b in &self.blocks {
            y = b.forward(g, s, y, ctx);
        }
        y.global_avg_pool()
    }
}

/// Stacks frames into a normalised `[B, 3, S, S]` tensor.
pub fn images_to_tensor(frames: &[&Observation]) -> Tensor {
    let size = frames.first().map_or(0, |o| o.size);
    let plane = size * size;
    let mut data = vec![0.0f32; frames.len() * 3 * plane];
    for (b, obs) in frames.iter().enumerate() {
        assert_eq!(obs.size, size, "mixed frame sizes in one batch");
        let base = b * 3 * plane;
        for (p, px) in obs.image.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[base + c * plane + p] = (px[c] as f32 / 255.0 - 0.5) * 4.0;
            }
        }
    }
    Tensor::from_vec(&[frames.len(), 3, size, size], data)
}
