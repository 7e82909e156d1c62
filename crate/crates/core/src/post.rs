//! Prediction post-processing: thresholding probability volumes into binary
//! masks and keeping the largest connected component.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default probability threshold of [`binarize`].
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Binary volume of shape `[D, H, W]` stored in C order (last axis fastest).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: [usize; 3],
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: [usize; 3], data: Vec<bool>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "mask shape {shape:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        Ok(Mask { shape, data })
    }

    pub fn empty(shape: [usize; 3]) -> Self {
        Mask {
            shape,
            data: vec![false; shape.iter().product()],
        }
    }

    /// Builds a mask from `f(z, y, x)`.
    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Mask { shape, data }
    }

    /// Interprets `values` as a strictly binary volume (0 or 1).
    pub fn from_binary_values(shape: [usize; 3], values: &[f64]) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract(format!("mask values must be 0 or 1, found {v}")));
        }
        Mask::new(shape, values.iter().map(|&v| v == 1.0).collect())
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.index(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: bool) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [_, h, w] = self.shape;
        [i / (h * w), (i / w) % h, i % w]
    }

    /// Number of foreground voxels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    /// Foreground as `0.0` / `1.0` values.
    pub fn to_values(&self) -> Vec<f64> {
        self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }
}

/// `v ≥ threshold → 1`, else 0.
pub fn binarize(shape: [usize; 3], prob: &[f64], threshold: f64) -> Result<Mask> {
    Mask::new(shape, prob.iter().map(|&v| v >= threshold).collect())
}

/// Voxel adjacency used for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    /// Face neighbours.
    Six,
    /// Face, edge and corner neighbours.
    #[default]
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            _ => Err(Error::Config(format!("connectivity must be 6 or 26, got {v}"))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// Neighbour offsets `(dz, dy, dx)` that precede a voxel in C order.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let manhattan = dz.abs() + dy.abs() + dx.abs();
                    let allowed = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan >= 1,
                    };
                    let precedes = (dz, dy, dx) < (0, 0, 0);
                    if allowed && precedes {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

/// Connected-component labeling of a mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledComponents {
    pub shape: [usize; 3],
    /// 0 for background, otherwise `1..=count`, numbered in order of each
    /// component's smallest linear index.
    pub labels: Vec<u32>,
    /// `sizes[l - 1]` is the voxel count of label `l`.
    pub sizes: Vec<usize>,
}

impl LabeledComponents {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn find(&mut self, mut a: u32) -> u32 {
        while self.parent[a as usize] != a {
            let grand = self.parent[self.parent[a as usize] as usize];
            self.parent[a as usize] = grand;
            a = grand;
        }
        a
    }

    /// Unites the sets of `a` and `b`, keeping the smaller root so that a
    /// root is always the first provisional label of its set.
    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Two-pass union-find labeling.
pub fn label_components(mask: &Mask, connectivity: Connectivity) -> LabeledComponents {
    let [d, h, w] = mask.shape;
    let offsets = connectivity.backward_offsets();
    let mut provisional = vec![u32::MAX; mask.len()];
    let mut set = DisjointSet { parent: Vec::new() };
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = mask.index(z, y, x);
                if !mask.data[i] {
                    continue;
                }
                let mut label = u32::MAX;
                for off in &offsets {
                    let (nz, ny, nx) = (z as isize + off[0], y as isize + off[1], x as isize + off[2]);
                    if nz < 0 || ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = mask.index(nz as usize, ny as usize, nx as usize);
                    if !mask.data[j] {
                        continue;
                    }
                    if label == u32::MAX {
                        label = provisional[j];
                    } else {
                        set.union(label, provisional[j]);
                    }
                }
                if label == u32::MAX {
                    label = set.parent.len() as u32;
                    set.parent.push(label);
                }
                provisional[i] = label;
            }
        }
    }
    // Roots in increasing provisional order are in order of first voxel.
    let mut dense = vec![0u32; set.parent.len()];
    let mut sizes = Vec::new();
    for p in 0..set.parent.len() as u32 {
        if set.find(p) == p {
            sizes.push(0);
            dense[p as usize] = sizes.len() as u32;
        }
    }
    let labels = provisional
        .iter()
        .map(|&p| {
            if p == u32::MAX {
                0
            } else {
                let l = dense[set.find(p) as usize];
                sizes[l as usize - 1] += 1;
                l
            }
        })
        .collect();
    LabeledComponents {
        shape: mask.shape,
        labels,
        sizes,
    }
}

/// Outcome of [`largest_component`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentSelection {
    pub mask: Mask,
    /// Number of components in the input.
    pub components: usize,
    /// Set when the input had no foreground (the output is then empty too).
    pub empty_input: bool,
}

/// Keeps the single largest component; ties go to the component with the
/// smallest linear index.
pub fn largest_component(mask: &Mask, connectivity: Connectivity) -> ComponentSelection {
    let lc = label_components(mask, connectivity);
    let Some(best) = (0..lc.count()).max_by(|&a, &b| lc.sizes[a].cmp(&lc.sizes[b]).then(b.cmp(&a))) else {
        return ComponentSelection {
            mask: Mask::empty(mask.shape),
            components: 0,
            empty_input: true,
        };
    };
    let keep = best as u32 + 1;
    ComponentSelection {
        mask: Mask {
            shape: mask.shape,
            data: lc.labels.iter().map(|&l| l == keep).collect(),
        },
        components: lc.count(),
        empty_input: false,
    }
}
