use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::LimeError;
use crate::data::ImageBuffer;

/// A partition of an image into 4-connected segments labelled `0..count`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Superpixels {
    pub width: usize,
    pub height: usize,
    pub count: usize,
    /// Row-major segment id per pixel.
    pub labels: Vec<usize>,
}

impl Superpixels {
    pub fn label(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.width + x]
    }

    /// Pixel count of every segment.
    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.count];
        for &l in &self.labels {
            out[l] += 1;
        }
        out
    }

    /// True for pixels with a 4-neighbor in another segment.
    pub fn boundaries(&self) -> Vec<bool> {
        let (w, h) = (self.width, self.height);
        let mut out = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                let l = self.label(x, y);
                let differs = |nx: usize, ny: usize| self.label(nx, ny) != l;
                out[y * w + x] = (x > 0 && differs(x - 1, y))
                    || (x + 1 < w && differs(x + 1, y))
                    || (y > 0 && differs(x, y - 1))
                    || (y + 1 < h && differs(x, y + 1));
            }
        }
        out
    }
}

fn srgb_to_lab(rgb: [f32; 3]) -> [f64; 3] {
    let lin = |v: f32| {
        let c = v as f64 / 255.0;
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    };
    let (r, g, b) = (lin(rgb[0]), lin(rgb[1]), lin(rgb[2]));
    let x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
    let f = |t: f64| {
        if t > 216.0 / 24389.0 {
            t.cbrt()
        } else {
            (24389.0 / 27.0 * t + 16.0) / 116.0
        }
    };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

#[derive(Clone, Copy, Debug)]
struct Center {
    lab: [f64; 3],
    x: f64,
    y: f64,
}

/// Grid extents with at most `k` cells whose aspect follows the image.
fn grid(k: usize, w: usize, h: usize) -> (usize, usize) {
    let ny = ((k as f64 * h as f64 / w as f64).sqrt().round() as usize).clamp(1, h.min(k));
    let nx = (k / ny).clamp(1, w);
    (nx, ny)
}

/// SLIC superpixels: k-means in (L, a, b, x, y) seeded on a regular grid,
/// followed by a pass that merges every fragment disconnected from its
/// cluster's largest piece into the neighbor it shares the longest border
/// with. Ids are then renumbered in raster order of first appearance.
pub fn slic_segments(
    image: &ImageBuffer,
    n_segments: usize,
    compactness: f64,
    max_iters: usize,
) -> Result<Superpixels, LimeError> {
    let (w, h) = (image.width(), image.height());
    if n_segments < 1 {
        return Err(LimeError::InvalidConfig("n_segments must be at least 1".into()));
    }
    if n_segments > w * h {
        return Err(LimeError::InvalidConfig(format!("n_segments {n_segments} exceeds the {} pixels", w * h)));
    }
    if !(compactness > 0.0 && compactness.is_finite()) {
        return Err(LimeError::InvalidConfig(format!("compactness must be positive, got {compactness}")));
    }
    let rgb = image.to_rgb();
    let lab: Vec<[f64; 3]> = rgb.data().chunks(3).map(|p| srgb_to_lab([p[0], p[1], p[2]])).collect();

    let (nx, ny) = grid(n_segments, w, h);
    let (sx, sy) = (w as f64 / nx as f64, h as f64 / ny as f64);
    let step = sx.max(sy);
    let grad = |x: usize, y: usize| -> f64 {
        let at = |x: usize, y: usize| lab[y * w + x];
        let (l, r) = (at(x.saturating_sub(1), y), at((x + 1).min(w - 1), y));
        let (u, d) = (at(x, y.saturating_sub(1)), at(x, (y + 1).min(h - 1)));
        (0..3).map(|c| (r[c] - l[c]).powi(2) + (d[c] - u[c]).powi(2)).sum()
    };
    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let cx = (((i as f64 + 0.5) * sx) as usize).min(w - 1);
            let cy = (((j as f64 + 0.5) * sy) as usize).min(h - 1);
            // move off edges to the lowest-gradient pixel of the 3x3 patch
            let (mut bx, mut by, mut best) = (cx, cy, grad(cx, cy));
            for y in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                for x in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                    let gv = grad(x, y);
                    if gv < best {
                        (bx, by, best) = (x, y, gv);
                    }
                }
            }
            centers.push(Center { lab: lab[by * w + bx], x: bx as f64, y: by as f64 });
        }
    }

    let spatial = (compactness / step).powi(2);
    let mut assign = vec![usize::MAX; w * h];
    let mut dist = vec![f64::INFINITY; w * h];
    for _ in 0..max_iters.max(1) {
        dist.fill(f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let x0 = (c.x - step).floor().max(0.0) as usize;
            let x1 = ((c.x + step).ceil() as usize).min(w - 1);
            let y0 = (c.y - step).floor().max(0.0) as usize;
            let y1 = ((c.y + step).ceil() as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = lab[y * w + x];
                    let dc: f64 = (0..3).map(|k| (p[k] - c.lab[k]).powi(2)).sum();
                    let ds = (x as f64 - c.x).powi(2) + (y as f64 - c.y).powi(2);
                    let d = dc + ds * spatial;
                    if d < dist[y * w + x] {
                        dist[y * w + x] = d;
                        assign[y * w + x] = ci;
                    }
                }
            }
        }
        // pixels no window reached go to the spatially nearest center
        for i in 0..w * h {
            if assign[i] == usize::MAX {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                assign[i] = (0..centers.len())
                    .min_by(|&a, &b| {
                        let da = (centers[a].x - x).powi(2) + (centers[a].y - y).powi(2);
                        let db = (centers[b].x - x).powi(2) + (centers[b].y - y).powi(2);
                        da.total_cmp(&db)
                    })
                    .expect("at least one center");
            }
        }
        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for (i, &a) in assign.iter().enumerate() {
            let s = &mut sums[a];
            for k in 0..3 {
                s[k] += lab[i][k];
            }
            s[3] += (i % w) as f64;
            s[4] += (i / w) as f64;
            s[5] += 1.0;
        }
        let mut moved = false;
        for (c, s) in centers.iter_mut().zip(&sums) {
            if s[5] == 0.0 {
                continue;
            }
            let next = Center { lab: [s[0] / s[5], s[1] / s[5], s[2] / s[5]], x: s[3] / s[5], y: s[4] / s[5] };
            moved |= (next.x - c.x).abs() > 1e-9 || (next.y - c.y).abs() > 1e-9;
            *c = next;
        }
        if !moved {
            break;
        }
    }
    Ok(enforce_connectivity(&assign, w, h))
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }
}

fn components(assign: &[usize], w: usize, h: usize) -> (Vec<usize>, Vec<usize>) {
    let mut comp = vec![usize::MAX; w * h];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        comp[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if comp[j] == usize::MAX && assign[j] == assign[i] {
                    comp[j] = id;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

fn enforce_connectivity(assign: &[usize], w: usize, h: usize) -> Superpixels {
    let (comp, sizes) = components(assign, w, h);
    let n = sizes.len();
    let mut cluster_of = vec![0; n];
    for (i, &c) in comp.iter().enumerate() {
        cluster_of[c] = assign[i];
    }
    // the largest piece of each cluster keeps it; first in raster order on ties
    let mut keeper: BTreeMap<usize, usize> = BTreeMap::new();
    for c in 0..n {
        let e = keeper.entry(cluster_of[c]).or_insert(c);
        if sizes[c] > sizes[*e] {
            *e = c;
        }
    }
    let kept: Vec<bool> = (0..n).map(|c| keeper[&cluster_of[c]] == c).collect();
    let mut orphans: Vec<usize> = (0..n).filter(|&c| !kept[c]).collect();
    orphans.sort_by_key(|&c| (sizes[c], c));

    let mut pixels: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &c) in comp.iter().enumerate() {
        pixels[c].push(i);
    }
    let mut uf = UnionFind((0..n).collect());
    let mut members: Vec<Vec<usize>> = (0..n).map(|c| vec![c]).collect();
    for &o in &orphans {
        let root = uf.find(o);
        if kept[root] {
            continue;
        }
        let mut border: BTreeMap<usize, usize> = BTreeMap::new();
        for &m in &members[root] {
            for &i in &pixels[m] {
                let (x, y) = (i % w, i / w);
                let mut neighbors = Vec::with_capacity(4);
                if x > 0 {
                    neighbors.push(i - 1);
                }
                if x + 1 < w {
                    neighbors.push(i + 1);
                }
                if y > 0 {
                    neighbors.push(i - w);
                }
                if y + 1 < h {
                    neighbors.push(i + w);
                }
                for j in neighbors {
                    let r = uf.find(comp[j]);
                    if r != root {
                        *border.entry(r).or_insert(0) += 1;
                    }
                }
            }
        }
        let Some((&target, _)) = border.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) else {
            continue;
        };
        uf.0[root] = target;
        let moved = std::mem::take(&mut members[root]);
        members[target].extend(moved);
    }

    let mut relabel: BTreeMap<usize, usize> = BTreeMap::new();
    let mut labels = Vec::with_capacity(w * h);
    for &c in &comp {
        let r = uf.find(c);
        let next = relabel.len();
        labels.push(*relabel.entry(r).or_insert(next));
    }
    Superpixels { width: w, height: h, count: relabel.len(), labels }
}
