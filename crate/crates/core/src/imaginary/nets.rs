use pour_nn::{Conv2d, Graph, ParamStore, Var};
use rand::Rng;

/// Residual encoder-decoder with instance normalisation. The decoder emits a
/// colour `t` and a per-pixel blend `a`; the output is `x + a (t - x)`, which
/// stays in `[-1, 1]` and lets geometry both domains share (the vessel, the
/// stream) bypass the stride-2 bottleneck. Input side length must be even.
#[derive(Clone, Debug)]
pub struct Generator {
    enc1: Conv2d,
    enc2: Conv2d,
    res: Vec<(Conv2d, Conv2d)>,
    dec: Conv2d,
    out: Conv2d,
    blend: Conv2d,
}

impl Generator {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        let c = width;
        let res = (0..2)
            .map(|i| {
                (
                    Conv2d::new(store, &format!("{name}.res{i}.a"), 2 * c, 2 * c, 3, 1, 1, false, rng),
                    Conv2d::new(store, &format!("{name}.res{i}.b"), 2 * c, 2 * c, 3, 1, 1, false, rng),
                )
            })
            .collect();
        Generator {
            enc1: Conv2d::new(store, &format!("{name}.enc1"), 3, c, 3, 1, 1, false, rng),
            enc2: Conv2d::new(store, &format!("{name}.enc2"), c, 2 * c, 3, 2, 1, false, rng),
            res,
            dec: Conv2d::new(store, &format!("{name}.dec"), 2 * c, c, 3, 1, 1, false, rng),
            out: Conv2d::new(store, &format!("{name}.out"), c, 3, 3, 1, 1, true, rng),
            blend: Conv2d::new(store, &format!("{name}.blend"), c, 3, 3, 1, 1, true, rng),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, s: &ParamStore, x: Var<'g>) -> Var<'g> {
        let y = self.enc1.forward(g, s, x).instance_norm().relu();
        let mut y = self.enc2.forward(g, s, y).instance_norm().relu();
        for (a, b) in &self.res {
            let r = a.forward(g, s, y).instance_norm().relu();
            y = y.add(b.forward(g, s, r).instance_norm());
        }
        let y = self.dec.forward(g, s, y.upsample2x()).instance_norm().relu();
        let t = self.out.forward(g, s, y).tanh();
        let a = self.blend.forward(g, s, y).sigmoid();
        x.add(a.mul(t.sub(x)))
    }
}

/// Patch classifier whose patch map is averaged to one score per image.
#[derive(Clone, Debug)]
pub struct Discriminator {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        Discriminator {
            c1: Conv2d::new(store, &format!("{name}.c1"), 3, width, 3, 2, 1, true, rng),
            c2: Conv2d::new(store, &format!("{name}.c2"), width, 2 * width, 3, 2, 1, false, rng),
            c3: Conv2d::new(store, &format!("{name}.c3"), 2 * width, 1, 3, 1, 1, true, rng),
        }
    }

    /// `[B, 3, S, S]` to `[B, 1]`.
    pub fn forward<'g>(&self, g: &'g Graph, s: &ParamStore, x: Var<'g>) -> Var<'g> {
        let y = self.c1.forward(g, s, x).leaky_relu(0.2);
        let y = self.c2.forward(g, s, y).instance_norm().leaky_relu(0.2);
        self.c3.forward(g, s, y).global_avg_pool()
    }
}
