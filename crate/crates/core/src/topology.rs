//! Vietoris-Rips persistent homology over Z/2 and shuffle-based Betti numbers.
//!
//! Pairs are computed by persistent cohomology in the style of Ripser: simplices
//! are addressed through the combinatorial number system, coboundaries are
//! enumerated on demand, reduced columns of one dimension clear the columns of
//! the next, and columns whose first cofacet has equal diameter are paired
//! without reduction. The filtration stops at the enclosing radius, beyond
//! which the complex is a cone and no pair can change. Over a field the result
//! equals the homology diagram.

use alloc::collections::BinaryHeap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use hashbrown::HashMap;
use rand::seq::index::sample;

use crate::data::Session;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{stream, SeededRng};
use crate::trainer::{fit, TrainConfig};

/// Largest point cloud accepted.
pub const MAX_POINTS: usize = 1200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bar {
    pub birth: f64,
    /// `f64::INFINITY` for classes that never die.
    pub death: f64,
}

impl Bar {
    pub fn lifespan(&self) -> f64 {
        self.death - self.birth
    }

    pub fn is_infinite(&self) -> bool {
        self.death == f64::INFINITY
    }
}

/// Bars per homology dimension `0..=max_dim`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PersistenceDiagram {
    pub bars: Vec<Vec<Bar>>,
}

impl PersistenceDiagram {
    pub fn max_dim(&self) -> usize {
        self.bars.len().saturating_sub(1)
    }

    pub fn dimension(&self, h: usize) -> &[Bar] {
        self.bars.get(h).map_or(&[], Vec::as_slice)
    }

    /// Longest finite lifespan per dimension, 0 when there is none.
    pub fn max_finite_lifespans(&self) -> Vec<f64> {
        self.bars
            .iter()
            .map(|b| {
                b.iter()
                    .filter(|bar| !bar.is_infinite())
                    .map(Bar::lifespan)
                    .fold(0.0, f64::max)
            })
            .collect()
    }

    /// Every dimension's bars sorted by (birth, death).
    pub fn sorted(&self) -> Self {
        let mut out = self.clone();
        for b in &mut out.bars {
            b.sort_by(|x, y| x.birth.total_cmp(&y.birth).then(x.death.total_cmp(&y.death)));
        }
        out
    }
}

/// Euclidean distance matrix.
pub fn distance_matrix(points: &Matrix) -> Matrix {
    let n = points.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v = libm::sqrt(
                points
                    .row(i)
                    .iter()
                    .zip(points.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>(),
            );
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    d
}

struct Binomial {
    table: Vec<u64>,
    width: usize,
}

impl Binomial {
    fn new(n: usize, kmax: usize) -> Self {
        let width = kmax + 1;
        let mut table = vec![0u64; (n + 1) * width];
        for i in 0..=n {
            table[i * width] = 1;
            for j in 1..=kmax.min(i) {
                table[i * width + j] = table[(i - 1) * width + j - 1] + if j < i { table[(i - 1) * width + j] } else { 0 };
            }
        }
        Self { table, width }
    }

    #[inline]
    fn get(&self, n: usize, k: usize) -> u64 {
        if k >= self.width || k > n {
            0
        } else {
            self.table[n * self.width + k]
        }
    }
}

/// Simplex in the filtration: diameter plus combinatorial index.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    diam: f64,
    index: u64,
}

/// Heap order: the entry earliest in the filtration (smallest diameter, then
/// largest index) is the greatest.
impl Eq for Entry {}
impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.diam.total_cmp(&self.diam).then(self.index.cmp(&other.index))
    }
}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Rips<'a> {
    dist: &'a [f64],
    n: usize,
    threshold: f64,
    binom: Binomial,
    words: usize,
    /// Row `a` holds the distances from `a` in ascending order.
    sorted: Vec<f64>,
    /// Bitset of the `k` vertices nearest to `a` at `(a * (n + 1) + k) * words`.
    near: Vec<u64>,
    /// Distinct pairwise distances up to the threshold, ascending.
    levels: Vec<f64>,
    /// Position of each pairwise distance in `levels`.
    rank: Vec<u32>,
}

impl<'a> Rips<'a> {
    fn new(dist: &'a [f64], n: usize, threshold: f64, max_dim: usize) -> Self {
        let mut rips = Self {
            dist,
            n,
            threshold,
            binom: Binomial::new(n, max_dim + 2),
            words: n.div_ceil(64),
            sorted: Vec::new(),
            near: Vec::new(),
            levels: Vec::new(),
            rank: Vec::new(),
        };
        if max_dim == 0 {
            return rips;
        }
        let words = rips.words;
        rips.sorted = vec![0.0; n * n];
        rips.near = vec![0u64; n * (n + 1) * words];
        let mut order: Vec<usize> = (0..n).collect();
        for a in 0..n {
            order.sort_unstable_by(|&x, &y| rips.d(a, x).total_cmp(&rips.d(a, y)).then(x.cmp(&y)));
            let base = a * (n + 1) * words;
            for (k, &v) in order.iter().enumerate() {
                rips.sorted[a * n + k] = rips.d(a, v);
                let (prev, next) = rips.near[base + k * words..base + (k + 2) * words].split_at_mut(words);
                next.copy_from_slice(prev);
                next[v / 64] |= 1 << (v % 64);
            }
        }
        let mut levels: Vec<f64> = (0..n)
            .flat_map(|a| (0..a).map(move |b| (a, b)))
            .map(|(a, b)| rips.d(a, b))
            .filter(|&d| d <= threshold)
            .collect();
        levels.sort_unstable_by(f64::total_cmp);
        levels.dedup();
        rips.rank = dist
            .iter()
            .map(|&d| if d <= threshold { levels.partition_point(|&l| l < d) as u32 } else { u32::MAX })
            .collect();
        rips.levels = levels;
        rips
    }

    #[inline]
    fn d(&self, i: usize, j: usize) -> f64 {
        self.dist[i * self.n + j]
    }

    /// Vertices of simplex `index` of dimension `dim`, largest first.
    fn vertices(&self, mut index: u64, dim: usize, out: &mut Vec<usize>) {
        out.clear();
        let mut hi = self.n;
        for k in (1..=dim + 1).rev() {
            // largest v < hi with C(v, k) <= index
            let (mut lo, mut up) = (k - 1, hi);
            while up - lo > 1 {
                let mid = (lo + up) / 2;
                if self.binom.get(mid, k) <= index {
                    lo = mid;
                } else {
                    up = mid;
                }
            }
            out.push(lo);
            index -= self.binom.get(lo, k);
            hi = lo;
        }
    }

    /// Index of the simplex with vertices `verts`, largest first.
    fn index_of(&self, verts: &[usize]) -> u64 {
        verts
            .iter()
            .enumerate()
            .map(|(i, &v)| self.binom.get(v, verts.len() - i))
            .sum()
    }

    fn diameter(&self, verts: &[usize]) -> f64 {
        let mut diam: f64 = 0.0;
        for a in 0..verts.len() {
            for b in 0..a {
                diam = diam.max(self.d(verts[a], verts[b]));
            }
        }
        diam
    }

    /// `verts` with `w` inserted, largest first.
    fn with_vertex(verts: &[usize], w: usize, out: &mut Vec<usize>) {
        out.clear();
        let at = verts.iter().position(|&v| v < w).unwrap_or(verts.len());
        out.extend_from_slice(&verts[..at]);
        out.push(w);
        out.extend_from_slice(&verts[at..]);
    }

    fn cofacets<'s>(&'s self, simplex: Entry, vertices: &'s [usize]) -> Cofacets<'s> {
        Cofacets {
            rips: self,
            idx_below: simplex.index,
            idx_above: 0,
            v: self.n as isize - 1,
            k: vertices.len(),
            vertices,
            diam: simplex.diam,
        }
    }

    /// Offset of the bitset holding the vertices within `radius` of `a`.
    fn row(&self, a: usize, radius: f64) -> usize {
        let row = &self.sorted[a * self.n..(a + 1) * self.n];
        (a * (self.n + 1) + row.partition_point(|&d| d <= radius)) * self.words
    }

    fn rows(&self, verts: &[usize], radius: f64) -> [usize; 4] {
        let mut rows = [0; 4];
        for (r, &v) in rows.iter_mut().zip(verts) {
            *r = self.row(v, radius);
        }
        rows
    }

    /// Vertices outside `verts` within `radius` of all of them.
    fn common(&self, verts: &[usize], radius: f64, out: &mut [u64]) {
        out.fill(u64::MAX);
        for &a in verts {
            let start = self.row(a, radius);
            for (x, &b) in out.iter_mut().zip(&self.near[start..start + self.words]) {
                *x &= b;
            }
        }
        for &a in verts {
            out[a / 64] &= !(1 << (a % 64));
        }
    }

    /// Largest vertex outside `verts` inside all the bitsets at `rows`.
    fn top_common(&self, verts: &[usize], rows: &[usize]) -> Option<usize> {
        for word in (0..self.words).rev() {
            let mut x = u64::MAX;
            for &r in rows {
                x &= self.near[r + word];
            }
            for &v in verts {
                if v / 64 == word {
                    x &= !(1 << (v % 64));
                }
            }
            if x != 0 {
                return Some(word * 64 + 63 - x.leading_zeros() as usize);
            }
        }
        None
    }

    /// The filtration-last facet when it has the simplex's own diameter, with
    /// the position of the vertex it leaves out.
    fn last_facet(&self, simplex: Entry, verts: &[usize]) -> Option<(Entry, usize)> {
        let mut facet = [0; 3];
        let mut best: Option<(Entry, usize)> = None;
        for skip in 0..verts.len() {
            let mut k = 0;
            for (i, &v) in verts.iter().enumerate() {
                if i != skip {
                    facet[k] = v;
                    k += 1;
                }
            }
            if self.diameter(&facet[..k]) == simplex.diam {
                let index = self.index_of(&facet[..k]);
                if best.is_none_or(|(b, _)| index < b.index) {
                    best = Some((
                        Entry {
                            diam: simplex.diam,
                            index,
                        },
                        skip,
                    ));
                }
            }
        }
        best
    }

    /// Cofacet forming a zero-persistence apparent pair with `simplex`; `rows`
    /// are the bitset offsets of its vertices at its diameter. The first
    /// cofacet adds the largest vertex within that diameter of all others.
    fn apparent_cofacet(&self, simplex: Entry, verts: &[usize], rows: &[usize]) -> Option<Entry> {
        let w = self.top_common(verts, rows)?;
        let mut upper = [0; 4];
        let at = verts.iter().position(|&v| v < w).unwrap_or(verts.len());
        upper[..at].copy_from_slice(&verts[..at]);
        upper[at] = w;
        upper[at + 1..=verts.len()].copy_from_slice(&verts[at..]);
        let upper = &upper[..=verts.len()];
        let cofacet = Entry {
            diam: simplex.diam,
            index: self.index_of(upper),
        };
        let (last, _) = self.last_facet(cofacet, upper)?;
        (last.index == simplex.index).then_some(cofacet)
    }

    /// Facet forming a zero-persistence apparent pair with `simplex`.
    fn apparent_facet(&self, simplex: Entry, verts: &[usize], rows: &[usize]) -> Option<Entry> {
        if verts.len() < 3 {
            return None;
        }
        let (facet, skip) = self.last_facet(simplex, verts)?;
        let (mut fv, mut fr) = ([0; 3], [0; 3]);
        let mut k = 0;
        for i in (0..verts.len()).filter(|&i| i != skip) {
            fv[k] = verts[i];
            fr[k] = rows[i];
            k += 1;
        }
        (self.top_common(&fv[..k], &fr[..k]) == Some(verts[skip])).then_some(facet)
    }

    /// Emits `(level, index)` for the cofacets of `simplex` whose diameter
    /// lies in `(lo, hi]`, given every vertex's bitset offset at both radii.
    #[allow(clippy::too_many_arguments)]
    fn band(
        &self,
        simplex: Entry,
        verts: &[usize],
        lo: f64,
        hi: f64,
        rows_lo: &[usize],
        rows_hi: &[usize],
        mut emit: impl FnMut(u32, u64),
    ) {
        if simplex.diam > hi {
            return;
        }
        let level = self.levels.partition_point(|&l| l < simplex.diam) as u32;
        let exclude_below = simplex.diam <= lo;
        for word in 0..self.words {
            let (mut bits, mut below) = (u64::MAX, u64::MAX);
            for &v in verts {
                bits &= self.near[rows_hi[v] + word];
                below &= self.near[rows_lo[v] + word];
                if v / 64 == word {
                    bits &= !(1 << (v % 64));
                }
            }
            if exclude_below {
                bits &= !below;
            }
            while bits != 0 {
                let w = word * 64 + bits.trailing_zeros() as usize;
                bits &= bits - 1;
                let rank = verts.iter().map(|&v| self.rank[w * self.n + v]).fold(level, u32::max);
                emit(rank, cofacet_index(&self.binom, verts, w));
            }
        }
    }
}

/// Cofacets of a simplex in decreasing index order.
struct Cofacets<'a> {
    rips: &'a Rips<'a>,
    idx_below: u64,
    idx_above: u64,
    v: isize,
    k: usize,
    vertices: &'a [usize],
    diam: f64,
}

impl Cofacets<'_> {
    /// With `all` false only cofacets adding a vertex above every existing one
    /// are produced. Returns the cofacet and the added vertex.
    fn next(&mut self, all: bool) -> Option<(Entry, usize)> {
        let b = &self.rips.binom;
        if self.v < self.k as isize || (!all && b.get(self.v as usize, self.k) <= self.idx_below) {
            return None;
        }
        loop {
            let c = b.get(self.v as usize, self.k);
            if c > self.idx_below {
                break;
            }
            self.idx_below -= c;
            self.idx_above += b.get(self.v as usize, self.k + 1);
            self.v -= 1;
            self.k -= 1;
        }
        let v = self.v as usize;
        let mut diam = self.diam;
        for &w in self.vertices {
            diam = diam.max(self.rips.d(v, w));
        }
        let index = self.idx_above + b.get(v, self.k + 1) + self.idx_below;
        self.v -= 1;
        Some((Entry { diam, index }, v))
    }
}

/// Persistence diagram of the Vietoris-Rips filtration of `points` up to
/// homology dimension `max_dim` (at most 2), truncated at `max_radius`.
pub fn vr_persistence(points: &Matrix, max_dim: usize, max_radius: f64) -> Result<PersistenceDiagram> {
    if !points.is_finite() {
        return Err(Error::NonFinite("point coordinates".into()));
    }
    vr_persistence_from_distances(&distance_matrix(points), max_dim, max_radius)
}

/// As [`vr_persistence`], from a symmetric distance matrix.
pub fn vr_persistence_from_distances(dist: &Matrix, max_dim: usize, max_radius: f64) -> Result<PersistenceDiagram> {
    let n = dist.rows();
    if dist.cols() != n {
        return Err(Error::InvalidConfig("distance matrix must be square".into()));
    }
    if n > MAX_POINTS {
        return Err(Error::InvalidConfig(format!(
            "{n} points exceed the supported maximum of {MAX_POINTS}"
        )));
    }
    if max_dim > 2 {
        return Err(Error::Unsupported(format!("homology dimension {max_dim} is not supported (max 2)")));
    }
    if !(max_radius >= 0.0) {
        return Err(Error::InvalidConfig(format!("max_radius must be nonnegative, got {max_radius}")));
    }
    if !dist.is_finite() {
        return Err(Error::NonFinite("distance matrix".into()));
    }
    let mut diagram = PersistenceDiagram {
        bars: vec![Vec::new(); max_dim + 1],
    };
    if n == 0 {
        return Ok(diagram);
    }
    let enclosing = (0..n)
        .map(|i| dist.row(i).iter().copied().fold(0.0, f64::max))
        .fold(f64::INFINITY, f64::min);
    let rips = Rips::new(dist.as_slice(), n, max_radius.min(enclosing), max_dim);

    // dimension 0 by union-find over edges in filtration order
    let mut edges: Vec<Entry> = Vec::new();
    for j in 1..n {
        for i in 0..j {
            let diam = rips.d(i, j);
            if diam <= rips.threshold {
                edges.push(Entry {
                    diam,
                    index: rips.binom.get(j, 2) + i as u64,
                });
            }
        }
    }
    edges.sort_unstable_by(|a, b| b.cmp(a));
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut columns: Vec<Entry> = Vec::new();
    let mut verts = Vec::with_capacity(2);
    for &e in &edges {
        rips.vertices(e.index, 1, &mut verts);
        let (a, b) = (find(&mut parent, verts[0]), find(&mut parent, verts[1]));
        if a != b {
            parent[a.max(b)] = a.min(b);
            diagram.bars[0].push(Bar { birth: 0.0, death: e.diam });
        } else if max_dim > 0 && rips.apparent_cofacet(e, &verts, &rips.rows(&verts, e.diam)[..2]).is_none() {
            columns.push(e);
        }
    }
    for v in 0..n {
        if find(&mut parent, v) == v {
            diagram.bars[0].push(Bar {
                birth: 0.0,
                death: f64::INFINITY,
            });
        }
    }
    if max_dim == 0 {
        return Ok(diagram);
    }
    columns.reverse();
    let mut simplices = edges;

    for dim in 1..=max_dim {
        let mut pivots: HashMap<u64, usize> = HashMap::new();
        reduce(&rips, dim, &columns, &mut pivots, &mut diagram.bars[dim]);
        if dim < max_dim {
            let (next_simplices, next_columns) =
                assemble(&rips, dim, &simplices, &pivots, dim + 1 < max_dim);
            simplices = next_simplices;
            columns = next_columns;
        }
    }
    Ok(diagram)
}

/// Cofacets of `simplices` (dimension `dim`) within the threshold that still
/// need a column, sorted in reverse filtration order. Cofacets already paired
/// as pivots or in an apparent pair are left out.
fn assemble(
    rips: &Rips<'_>,
    dim: usize,
    simplices: &[Entry],
    pivots: &HashMap<u64, usize>,
    keep_simplices: bool,
) -> (Vec<Entry>, Vec<Entry>) {
    let mut next = Vec::new();
    let mut columns = Vec::new();
    let mut verts = Vec::with_capacity(dim + 1);
    let mut cverts = Vec::with_capacity(dim + 2);
    for &s in simplices {
        rips.vertices(s.index, dim, &mut verts);
        let mut cof = rips.cofacets(s, &verts);
        while let Some((c, w)) = cof.next(false) {
            if c.diam > rips.threshold {
                continue;
            }
            if keep_simplices {
                next.push(c);
            }
            if pivots.contains_key(&c.index) {
                continue;
            }
            Rips::with_vertex(&verts, w, &mut cverts);
            let rows = rips.rows(&cverts, c.diam);
            let rows = &rows[..cverts.len()];
            if rips.apparent_facet(c, &cverts, rows).is_none() && rips.apparent_cofacet(c, &cverts, rows).is_none() {
                columns.push(c);
            }
        }
    }
    // reverse filtration order: diameter descending, index ascending
    columns.sort_unstable_by(|a, b| b.diam.total_cmp(&a.diam).then(a.index.cmp(&b.index)));
    (next, columns)
}

/// What reduces a pivot: an earlier column or the facet of an apparent pair.
enum Owner {
    Column(usize),
    Apparent(Entry),
}

fn owner(rips: &Rips<'_>, dim: usize, pivots: &HashMap<u64, usize>, pivot: Entry, verts: &mut Vec<usize>) -> Option<Owner> {
    if let Some(&j) = pivots.get(&pivot.index) {
        return Some(Owner::Column(j));
    }
    rips.vertices(pivot.index, dim + 1, verts);
    let rows = rips.rows(verts, pivot.diam);
    rips.apparent_facet(pivot, verts, &rows[..verts.len()]).map(Owner::Apparent)
}

/// Diameter bands used once a column's pivot lies above its own diameter.
const BANDS: usize = 32;

/// Reduces the coboundary columns of `columns` (dimension `dim`), recording
/// pivots and the resulting bars.
fn reduce(
    rips: &Rips<'_>,
    dim: usize,
    columns: &[Entry],
    pivots: &mut HashMap<u64, usize>,
    bars: &mut Vec<Bar>,
) {
    // reduction matrix: column j is columns[j] plus extras[offsets[j]..offsets[j + 1]]
    let mut offsets: Vec<usize> = Vec::with_capacity(columns.len() + 1);
    offsets.push(0);
    let mut extras: Vec<Entry> = Vec::new();
    let mut flat = FlatColumn::new(rips.words, dim + 1);
    let mut working: Vec<Entry> = Vec::new();
    let mut verts = Vec::with_capacity(dim + 2);
    let mut added: Vec<Entry> = Vec::new();
    let mut parts: Vec<Entry> = Vec::new();
    let mut pverts = Vec::with_capacity(dim + 2);
    let mut buckets: Vec<Vec<u64>> = Vec::new();
    let (mut rows_lo, mut rows_hi): (Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new());

    for (pos, &col) in columns.iter().enumerate() {
        working.clear();
        // Restricted to cofacets of the column's own diameter, filtration order
        // is decreasing index, so the coboundaries merge lazily. A pivot found
        // there is the true pivot since every other entry comes later.
        flat.clear();
        rips.vertices(col.index, dim, &mut verts);
        flat.add(rips, col, &verts);
        let mut pivot = loop {
            let Some(index) = flat.pivot(rips) else { break None };
            let p = Entry { diam: col.diam, index };
            let Some(by) = owner(rips, dim, pivots, p, &mut pverts) else { break Some(p) };
            owner_parts(by, columns, &extras, &offsets, &mut parts);
            for &e in &parts {
                working.push(e);
                if e.diam == col.diam {
                    rips.vertices(e.index, dim, &mut verts);
                    flat.add(rips, e, &verts);
                }
            }
        };
        if pivot.is_none() {
            // Every remaining entry lies above the column's diameter. Walk them
            // in bands of diameter levels with one bucket per level; only the
            // current level is kept ordered. The pivot only moves forward, and
            // entries of an added column earlier than the pivot cancel inside
            // that column, so they are never stored.
            added.clear();
            added.push(col);
            added.extend_from_slice(&working);
            let first = rips.levels.partition_point(|&d| d <= col.diam);
            let count = rips.levels.len() - first;
            let mut lo = col.diam;
            rows_lo.clear();
            rows_lo.extend((0..rips.n).map(|v| rips.row(v, lo)));
            'bands: for b in 1..=BANDS {
                let (start, end) = (first + count * (b - 1) / BANDS, first + count * b / BANDS);
                if start == end {
                    continue;
                }
                let hi = rips.levels[end - 1];
                rows_hi.clear();
                rows_hi.extend((0..rips.n).map(|v| rips.row(v, hi)));
                buckets.resize_with(end - start, Vec::new);
                buckets.iter_mut().for_each(Vec::clear);
                for &s in &added {
                    rips.vertices(s.index, dim, &mut verts);
                    rips.band(s, &verts, lo, hi, &rows_lo, &rows_hi, |r, i| buckets[r as usize - start].push(i));
                }
                for level in start..end {
                    let mut heap = BinaryHeap::from(core::mem::take(&mut buckets[level - start]));
                    while let Some(index) = pop_odd(&mut heap) {
                        let p = Entry {
                            diam: rips.levels[level],
                            index,
                        };
                        let Some(by) = owner(rips, dim, pivots, p, &mut pverts) else {
                            pivot = Some(p);
                            break 'bands;
                        };
                        heap.push(index);
                        owner_parts(by, columns, &extras, &offsets, &mut parts);
                        for &e in &parts {
                            working.push(e);
                            added.push(e);
                            rips.vertices(e.index, dim, &mut verts);
                            rips.band(e, &verts, lo, hi, &rows_lo, &rows_hi, |r, i| {
                                let r = r as usize;
                                if r == level && i <= index {
                                    heap.push(i);
                                } else if r > level {
                                    buckets[r - start].push(i);
                                }
                            });
                        }
                    }
                    buckets[level - start] = heap.into_vec();
                }
                lo = hi;
                core::mem::swap(&mut rows_lo, &mut rows_hi);
            }
        }
        match pivot {
            Some(p) => {
                if p.diam > col.diam {
                    bars.push(Bar {
                        birth: col.diam,
                        death: p.diam,
                    });
                }
                pivots.insert(p.index, pos);
            }
            None => bars.push(Bar {
                birth: col.diam,
                death: f64::INFINITY,
            }),
        }
        // keep the Z/2 sum of the added columns
        working.sort_unstable_by_key(|e| e.index);
        let mut i = 0;
        while i < working.len() {
            if i + 1 < working.len() && working[i + 1].index == working[i].index {
                i += 2;
            } else {
                extras.push(working[i]);
                i += 1;
            }
        }
        offsets.push(extras.len());
    }
}

/// Simplices whose coboundaries sum to the owning column.
fn owner_parts(by: Owner, columns: &[Entry], extras: &[Entry], offsets: &[usize], out: &mut Vec<Entry>) {
    out.clear();
    match by {
        Owner::Column(j) => {
            out.push(columns[j]);
            out.extend_from_slice(&extras[offsets[j]..offsets[j + 1]]);
        }
        Owner::Apparent(facet) => out.push(facet),
    }
}

/// Pops the largest index of odd multiplicity.
fn pop_odd(heap: &mut BinaryHeap<u64>) -> Option<u64> {
    loop {
        let top = heap.pop()?;
        let mut count = 1;
        while heap.peek() == Some(&top) {
            heap.pop();
            count += 1;
        }
        if count % 2 == 1 {
            return Some(top);
        }
    }
}

/// Index of `verts` (largest first) with vertex `w` added.
fn cofacet_index(binom: &Binomial, verts: &[usize], w: usize) -> u64 {
    let mut index = 0;
    let mut k = verts.len() + 1;
    let mut inserted = false;
    for &v in verts {
        if !inserted && w > v {
            index += binom.get(w, k);
            k -= 1;
            inserted = true;
        }
        index += binom.get(v, k);
        k -= 1;
    }
    if !inserted {
        index += binom.get(w, 1);
    }
    index
}

/// Z/2 sum of equal-diameter coboundaries, each a stream of decreasing
/// cofacet indices read off a neighbor bitset.
struct FlatColumn {
    words: usize,
    /// Vertices per simplex.
    len: usize,
    bits: Vec<u64>,
    verts: Vec<[usize; 3]>,
    heap: BinaryHeap<(u64, usize)>,
}

impl FlatColumn {
    const DETACHED: usize = usize::MAX;

    fn new(words: usize, len: usize) -> Self {
        Self {
            words,
            len,
            bits: Vec::new(),
            verts: Vec::new(),
            heap: BinaryHeap::new(),
        }
    }

    fn clear(&mut self) {
        self.bits.clear();
        self.verts.clear();
        self.heap.clear();
    }

    /// Adds the coboundary of a simplex whose diameter is the column's.
    fn add(&mut self, rips: &Rips<'_>, simplex: Entry, verts: &[usize]) {
        let s = self.verts.len();
        let mut v = [0; 3];
        v[..self.len].copy_from_slice(verts);
        self.verts.push(v);
        self.bits.resize((s + 1) * self.words, 0);
        rips.common(verts, simplex.diam, &mut self.bits[s * self.words..]);
        self.advance(rips, s);
    }

    fn advance(&mut self, rips: &Rips<'_>, s: usize) {
        if s == Self::DETACHED {
            return;
        }
        let bits = &mut self.bits[s * self.words..(s + 1) * self.words];
        if let Some((word, b)) = bits.iter_mut().enumerate().rev().find(|(_, b)| **b != 0) {
            let bit = 63 - b.leading_zeros() as usize;
            *b &= !(1 << bit);
            let index = cofacet_index(&rips.binom, &self.verts[s][..self.len], word * 64 + bit);
            self.heap.push((index, s));
        }
    }

    /// Largest index with odd multiplicity; it stays in the column.
    fn pivot(&mut self, rips: &Rips<'_>) -> Option<u64> {
        loop {
            let (index, s) = self.heap.pop()?;
            self.advance(rips, s);
            let mut count = 1;
            while let Some(&(other, t)) = self.heap.peek() {
                if other != index {
                    break;
                }
                self.heap.pop();
                self.advance(rips, t);
                count += 1;
            }
            if count % 2 == 1 {
                self.heap.push((index, Self::DETACHED));
                return Some(index);
            }
        }
    }
}

/// Prominent bars per dimension: lifespan strictly above the threshold, plus
/// every infinite bar.
pub fn betti_numbers(diagram: &PersistenceDiagram, thresholds: &[f64]) -> Result<Vec<usize>> {
    if thresholds.len() < diagram.bars.len() {
        return Err(Error::InvalidConfig(format!(
            "{} thresholds for {} dimensions",
            thresholds.len(),
            diagram.bars.len()
        )));
    }
    if thresholds.iter().any(|t| t.is_nan() || *t < 0.0) {
        return Err(Error::InvalidConfig("thresholds must be nonnegative".into()));
    }
    Ok(diagram
        .bars
        .iter()
        .zip(thresholds)
        .map(|(bars, &t)| bars.iter().filter(|b| b.is_infinite() || b.lifespan() > t).count())
        .collect())
}

/// Seeded uniform choice of `count` rows without replacement (all rows when
/// there are fewer), kept in their original order.
pub fn subsample(points: &Matrix, count: usize, rng: &mut SeededRng) -> Matrix {
    if points.rows() <= count {
        return points.clone();
    }
    let mut idx = sample(rng, points.rows(), count).into_vec();
    idx.sort_unstable();
    points.select_rows(&idx)
}

/// Per-dimension thresholds: the largest finite lifespan seen over
/// `n_shuffles` runs of a null pipeline. Run `i` receives its index and an
/// RNG seeded from `(seed, i)`.
pub fn shuffle_threshold<F>(n_shuffles: usize, seed: u64, max_dim: usize, mut pipeline: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, &mut SeededRng) -> Result<Matrix>,
{
    if n_shuffles == 0 {
        return Err(Error::InvalidConfig("at least one shuffle is required".into()));
    }
    let mut thresholds = vec![0.0f64; max_dim + 1];
    for i in 0..n_shuffles {
        merge_thresholds(&mut thresholds, &null_lifespans(i, seed, max_dim, &mut pipeline)?);
    }
    Ok(thresholds)
}

/// Largest finite lifespan per dimension of null run `i` alone. Runs are
/// independent, so callers may evaluate them in any order or in parallel and
/// combine them with [`merge_thresholds`].
pub fn null_lifespans<F>(i: usize, seed: u64, max_dim: usize, pipeline: &mut F) -> Result<Vec<f64>>
where
    F: FnMut(usize, &mut SeededRng) -> Result<Matrix>,
{
    let mut rng = stream(seed, 1000 + i as u64);
    let points = pipeline(i, &mut rng)?;
    Ok(vr_persistence(&points, max_dim, f64::INFINITY)?.max_finite_lifespans())
}

pub fn merge_thresholds(thresholds: &mut [f64], lifespans: &[f64]) {
    for (t, &l) in thresholds.iter_mut().zip(lifespans) {
        *t = t.max(l);
    }
}

/// Null pipeline that shuffles the session's labels over time, trains a fresh
/// model (seed offset by the run index), embeds the session and subsamples
/// `points` rows.
pub fn shuffled_training_null<'a>(
    session: &'a Session,
    config: &'a TrainConfig,
    points: usize,
) -> impl FnMut(usize, &mut SeededRng) -> Result<Matrix> + 'a {
    move |i, rng| {
        let shuffled = session.with_shuffled_labels(rng);
        let cfg = TrainConfig {
            seed: config.seed.wrapping_add(i as u64 + 1),
            ..config.clone()
        };
        let fitted = fit(core::slice::from_ref(&shuffled), &cfg)?;
        let model: &EncoderModel = &fitted.encoders[0];
        let z = model.transform_series(shuffled.signal())?;
        Ok(subsample(&z, points, rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sorted_bars(b: &[Bar]) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = b.iter().map(|b| (b.birth, b.death)).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        v
    }

    #[test]
    fn binomials_and_vertex_decoding() {
        let b = Binomial::new(10, 4);
        assert_eq!(b.get(10, 3), 120);
        assert_eq!(b.get(3, 4), 0);
        let dist = vec![0.0; 100];
        let rips = Rips::new(&dist, 10, 1.0, 2);
        let mut v = Vec::new();
        // {7, 4, 1}: C(7,3) + C(4,2) + C(1,1)
        rips.vertices(35 + 6 + 1, 2, &mut v);
        assert_eq!(v, vec![7, 4, 1]);
        assert_eq!(rips.index_of(&v), 42);
        assert_eq!(cofacet_index(&rips.binom, &[7, 1], 4), 42);
    }

    #[test]
    fn cofacets_come_in_decreasing_index() {
        let n = 7;
        let mut rng = stream(1, 1);
        let pts = Matrix::from_vec(n, 2, (0..2 * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let d = distance_matrix(&pts);
        let rips = Rips::new(d.as_slice(), n, f64::INFINITY, 2);
        let mut verts = Vec::new();
        let mut cv = Vec::new();
        for idx in 0..rips.binom.get(n, 2) {
            rips.vertices(idx, 1, &mut verts);
            let diam = rips.d(verts[0], verts[1]);
            let mut cof = rips.cofacets(Entry { diam, index: idx }, &verts);
            let mut last = u64::MAX;
            let mut count = 0;
            while let Some((c, w)) = cof.next(true) {
                assert!(c.index < last);
                last = c.index;
                rips.vertices(c.index, 2, &mut cv);
                assert!(verts.iter().all(|v| cv.contains(v)) && cv.contains(&w));
                assert_eq!(cofacet_index(&rips.binom, &verts, w), c.index);
                let want = (0..3)
                    .flat_map(|a| (0..a).map(move |b| (a, b)))
                    .map(|(a, b)| rips.d(cv[a], cv[b]))
                    .fold(0.0, f64::max);
                assert_eq!(c.diam, want);
                count += 1;
            }
            assert_eq!(count, n - 2);
        }
    }

    #[test]
    fn equilateral_triangle() {
        let h = libm::sqrt(3.0) / 2.0;
        let pts = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [0.5, h]]).unwrap();
        let d = vr_persistence(&pts, 2, f64::INFINITY).unwrap();
        let h0 = sorted_bars(d.dimension(0));
        assert_eq!(h0.len(), 3);
        assert_eq!(h0.iter().filter(|b| b.1 == f64::INFINITY).count(), 1);
        // the triangle fills at the same radius as its longest edge: no H1 bar
        assert!(d.dimension(1).is_empty());
        assert!(d.dimension(2).is_empty());
    }

    #[test]
    fn square_has_one_loop() {
        let pts = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        let d = vr_persistence(&pts, 2, f64::INFINITY).unwrap();
        let h1 = sorted_bars(d.dimension(1));
        assert_eq!(h1, vec![(1.0, libm::sqrt(2.0))]);
    }

    #[test]
    fn collinear_points_are_contractible() {
        let pts = Matrix::from_vec(12, 1, (0..12).map(|i| (i * i) as f64).collect()).unwrap();
        let d = vr_persistence(&pts, 2, f64::INFINITY).unwrap();
        assert_eq!(d.dimension(0).len(), 12);
        assert!(d.dimension(1).is_empty() && d.dimension(2).is_empty());
    }

    #[test]
    fn duplicates_give_zero_length_h0_bars() {
        let pts = Matrix::from_rows(&[[0.0, 0.0], [0.0, 0.0], [2.0, 0.0]]).unwrap();
        let d = vr_persistence(&pts, 1, f64::INFINITY).unwrap();
        assert_eq!(sorted_bars(d.dimension(0)), vec![(0.0, 0.0), (0.0, 2.0), (0.0, f64::INFINITY)]);
    }

    #[test]
    fn even_circle_has_one_long_loop() {
        let n = 100;
        let pts = Matrix::from_vec(
            n,
            2,
            (0..n)
                .flat_map(|i| {
                    let t = i as f64 * core::f64::consts::TAU / n as f64;
                    [libm::cos(t), libm::sin(t)]
                })
                .collect(),
        )
        .unwrap();
        let d = vr_persistence(&pts, 1, f64::INFINITY).unwrap();
        let long: Vec<&Bar> = d.dimension(1).iter().filter(|b| b.lifespan() > 0.5).collect();
        assert_eq!(long.len(), 1);
        assert_eq!(betti_numbers(&d, &[0.5, 0.5]).unwrap(), vec![1, 1]);
        assert_eq!(betti_numbers(&d, &[f64::INFINITY; 2]).unwrap(), vec![1, 0]);
    }

    #[test]
    fn truncated_radius_leaves_infinite_loop() {
        let pts = Matrix::from_rows(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]).unwrap();
        let d = vr_persistence(&pts, 1, 1.2).unwrap();
        assert_eq!(sorted_bars(d.dimension(1)), vec![(1.0, f64::INFINITY)]);
    }

    #[test]
    fn too_many_points_rejected() {
        let pts = Matrix::zeros(MAX_POINTS + 1, 1);
        assert!(vr_persistence(&pts, 1, f64::INFINITY).is_err());
    }

    #[test]
    fn thresholds_from_single_and_nested_shuffles() {
        let mut rng = stream(3, 3);
        let clouds: Vec<Matrix> = (0..4)
            .map(|_| Matrix::from_vec(20, 2, (0..40).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
            .collect();
        let one = shuffle_threshold(1, 0, 1, |i, _| Ok(clouds[i].clone())).unwrap();
        let want = vr_persistence(&clouds[0], 1, f64::INFINITY).unwrap().max_finite_lifespans();
        assert_eq!(one, want);
        let mut last = vec![0.0; 2];
        for k in 1..=4 {
            let t = shuffle_threshold(k, 0, 1, |i, _| Ok(clouds[i].clone())).unwrap();
            assert!(t.iter().zip(&last).all(|(a, b)| a >= b));
            last = t;
        }
    }

    #[test]
    fn subsample_is_seeded_and_ordered() {
        let pts = Matrix::from_vec(50, 1, (0..50).map(|i| i as f64).collect()).unwrap();
        let a = subsample(&pts, 10, &mut stream(1, 0));
        let b = subsample(&pts, 10, &mut stream(1, 0));
        assert_eq!(a, b);
        assert!(a.as_slice().windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subsample(&pts, 80, &mut stream(1, 0)), pts);
    }
}
