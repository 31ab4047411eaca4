//! The eight rotations and reflections of the square.

use crate::tensor::{Scalar, Tensor};

/// Dihedral transform: `code & 3` quarter turns counter-clockwise, then a
/// horizontal flip if `code >= 4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dihedral(u8);

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral(0);

    pub fn new(code: u8) -> Self {
        assert!(code < 8, "dihedral code {code} out of range");
        Dihedral(code)
    }

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(Dihedral)
    }

    pub fn code(self) -> u8 {
        self.0
    }

    pub fn turns(self) -> u8 {
        self.0 & 3
    }

    pub fn flips(self) -> bool {
        self.0 >= 4
    }

    pub fn inverse(self) -> Self {
        if self.flips() {
            self
        } else {
            Dihedral((4 - self.turns()) % 4)
        }
    }

    /// Output extents for an `h` by `w` input.
    pub fn out_dims(self, h: usize, w: usize) -> (usize, usize) {
        if self.turns() % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Input coordinate read by output `(y, x)` of an `h` by `w` input.
    pub fn source(self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let (mut ch, mut cw) = self.out_dims(h, w);
        let (mut y, mut x) = (y, if self.flips() { cw - 1 - x } else { x });
        for _ in 0..self.turns() {
            // rot90: out[y][x] = in[x][in_w - 1 - y], with in_w == out_h.
            (y, x) = (x, ch - 1 - y);
            (ch, cw) = (cw, ch);
        }
        (y, x)
    }

    /// Transforms one row-major plane, returning the new extents.
    pub fn apply_plane<T: Copy>(self, src: &[T], h: usize, w: usize) -> (Vec<T>, usize, usize) {
        assert_eq!(src.len(), h * w, "plane size");
        let (oh, ow) = self.out_dims(h, w);
        let mut out = Vec::with_capacity(src.len());
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = self.source(y, x, h, w);
                out.push(src[sy * w + sx]);
            }
        }
        (out, oh, ow)
    }
}

/// Applies `d` to every plane of `t`. The result is detached from any tape.
pub fn dihedral_tensor<T: Scalar>(t: &Tensor<T>, d: Dihedral) -> Tensor<T> {
    let s = t.shape();
    let (oh, ow) = d.out_dims(s.h(), s.w());
    let mut data = Vec::with_capacity(s.numel());
    for n in 0..s.n() {
        for c in 0..s.c() {
            data.extend(d.apply_plane(t.plane(n, c), s.h(), s.w()).0);
        }
    }
    Tensor::new(s.with_hw(oh, ow), data).expect("same element count")
}

impl super::PlanarImage {
    pub fn dihedral(&self, d: Dihedral) -> Self {
        let (oh, ow) = d.out_dims(self.height(), self.width());
        let mut data = Vec::with_capacity(self.data().len());
        for c in 0..self.channels() {
            data.extend(d.apply_plane(self.plane(c), self.height(), self.width()).0);
        }
        Self::new(self.space(), oh, ow, data).expect("same element count")
    }
}
