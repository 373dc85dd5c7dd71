//! Token grids: encoding between physical trajectories and (T, X, Y, Z, C)
//! arrays, per-channel normalization, regional decomposition and the cyclic
//! coverage check, plus the on-disk dataset formats (see [`qtns`] and
//! [`dataset`]).

pub mod dataset;
pub mod qtns;

use crate::error::{Error, Result};
use crate::qstate::{hermitian_decode, hermitian_encode, DensityMatrix, HermitianRealImage, C64};
use serde::{Deserialize, Serialize};

/// Spacetime grid extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub t: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl GridDims {
    pub fn new(t: usize, x: usize, y: usize, z: usize) -> Self {
        GridDims { t, x, y, z }
    }

    pub fn n_tokens(&self) -> usize {
        self.t * self.x * self.y * self.z
    }

    /// Number of tokens in one time frame.
    pub fn frame_tokens(&self) -> usize {
        self.x * self.y * self.z
    }

    #[inline]
    pub fn flat(&self, t: usize, x: usize, y: usize, z: usize) -> usize {
        ((t * self.x + x) * self.y + y) * self.z + z
    }

    #[inline]
    pub fn coords(&self, flat: usize) -> [usize; 4] {
        let z = flat % self.z;
        let rem = flat / self.z;
        let y = rem % self.y;
        let rem = rem / self.y;
        let x = rem % self.x;
        let t = rem / self.x;
        [t, x, y, z]
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.t, self.x, self.y, self.z]
    }
}

/// What the channel axis holds: the row-major real image of a d x d state,
/// optionally followed by the propagating field's real and imaginary parts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub state_dim: usize,
    pub has_field: bool,
}

impl ChannelLayout {
    pub fn channels(&self) -> usize {
        self.state_dim * self.state_dim + if self.has_field { 2 } else { 0 }
    }

    pub fn channel_names(&self) -> Vec<String> {
        let d = self.state_dim;
        let mut names: Vec<String> = (0..d * d)
            .map(|k| format!("rho_{}{}", k / d, k % d))
            .collect();
        if self.has_field {
            names.push("field_re".into());
            names.push("field_im".into());
        }
        names
    }
}

/// Real-valued token array of shape (T, X, Y, Z, C), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub dims: GridDims,
    pub layout: ChannelLayout,
    pub data: Vec<f64>,
}

impl TokenGrid {
    pub fn zeros(dims: GridDims, layout: ChannelLayout) -> Self {
        let n = dims.n_tokens() * layout.channels();
        TokenGrid { dims, layout, data: vec![0.0; n] }
    }

    pub fn channels(&self) -> usize {
        self.layout.channels()
    }

    pub fn token(&self, flat: usize) -> &[f64] {
        let c = self.channels();
        &self.data[flat * c..(flat + 1) * c]
    }

    pub fn token_mut(&mut self, flat: usize) -> &mut [f64] {
        let c = self.channels();
        &mut self.data[flat * c..(flat + 1) * c]
    }

    /// Sum of the diagonal (population) channels of one token; the trace of
    /// the decoded state without performing the full decode.
    pub fn population_trace(&self, flat: usize) -> f64 {
        let d = self.layout.state_dim;
        let tok = self.token(flat);
        (0..d).map(|i| tok[i * d + i]).sum()
    }

    pub fn shape(&self) -> [usize; 5] {
        [self.dims.t, self.dims.x, self.dims.y, self.dims.z, self.channels()]
    }
}

/// Pack per-point states (and optionally the field) into a token grid.
/// `rho_grid` is row-major over (T, X, Y, Z).
pub fn tokenize(
    rho_grid: &[DensityMatrix],
    field_grid: Option<&[C64]>,
    dims: GridDims,
    layout: ChannelLayout,
) -> Result<TokenGrid> {
    let n = dims.n_tokens();
    if rho_grid.len() != n {
        return Err(Error::invalid(format!(
            "tokenize: expected {n} states, got {}",
            rho_grid.len()
        )));
    }
    if layout.has_field != field_grid.is_some() {
        return Err(Error::invalid(
            "tokenize: field presence does not match the layout",
        ));
    }
    if let Some(f) = field_grid {
        if f.len() != n {
            return Err(Error::invalid("tokenize: field grid length mismatch"));
        }
    }
    let d = layout.state_dim;
    let mut grid = TokenGrid::zeros(dims, layout);
    for (idx, rho) in rho_grid.iter().enumerate() {
        if rho.dim() != d {
            return Err(Error::invalid(format!(
                "tokenize: state dim {} does not match layout dim {d}",
                rho.dim()
            )));
        }
        let image = hermitian_encode(rho);
        let tok = grid.token_mut(idx);
        tok[..d * d].copy_from_slice(image.to_vec());
        if let Some(f) = field_grid {
            tok[d * d] = f[idx].re;
            tok[d * d + 1] = f[idx].im;
        }
    }
    Ok(grid)
}

/// Inverse of [`tokenize`]. States are Hermitian by construction but not
/// necessarily physical (the grid may hold raw model output).
pub fn detokenize(grid: &TokenGrid) -> Result<(Vec<DensityMatrix>, Option<Vec<C64>>)> {
    let d = grid.layout.state_dim;
    let n = grid.dims.n_tokens();
    let mut states = Vec::with_capacity(n);
    let mut field = if grid.layout.has_field { Some(Vec::with_capacity(n)) } else { None };
    for idx in 0..n {
        let tok = grid.token(idx);
        let image = HermitianRealImage::from_entries(d, tok[..d * d].to_vec())?;
        states.push(hermitian_decode(&image));
        if let Some(f) = field.as_mut() {
            f.push(C64::new(tok[d * d], tok[d * d + 1]));
        }
    }
    Ok((states, field))
}

/// Per-channel normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standard deviations below this are floored so constant channels map to 0.
pub const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        NormStats { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Accumulate per-channel mean/std over a set of grids.
    pub fn compute(grids: &[&TokenGrid]) -> Result<Self> {
        let c = grids
            .first()
            .ok_or_else(|| Error::invalid("norm stats need at least one grid"))?
            .channels();
        let mut count = 0usize;
        let mut sum = vec![0.0f64; c];
        let mut sum_sq = vec![0.0f64; c];
        for g in grids {
            if g.channels() != c {
                return Err(Error::invalid("norm stats: channel count mismatch"));
            }
            for tok in g.data.chunks_exact(c) {
                for (k, &v) in tok.iter().enumerate() {
                    sum[k] += v;
                    sum_sq[k] += v * v;
                }
            }
            count += g.dims.n_tokens();
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / n - m * m).max(0.0)).sqrt().max(STD_FLOOR))
            .collect();
        Ok(NormStats { mean, std })
    }
}

/// (v - mean) / std per channel.
pub fn normalize(grid: &TokenGrid, stats: &NormStats) -> Result<TokenGrid> {
    apply_affine(grid, stats, false)
}

/// Exact inverse of [`normalize`].
pub fn denormalize(grid: &TokenGrid, stats: &NormStats) -> Result<TokenGrid> {
    apply_affine(grid, stats, true)
}

fn apply_affine(grid: &TokenGrid, stats: &NormStats, invert: bool) -> Result<TokenGrid> {
    let c = grid.channels();
    if stats.mean.len() != c || stats.std.len() != c {
        return Err(Error::invalid(format!(
            "normalization stats have {} channels, grid has {c}",
            stats.mean.len()
        )));
    }
    let mut out = grid.clone();
    for tok in out.data.chunks_exact_mut(c) {
        for k in 0..c {
            tok[k] = if invert {
                tok[k] * stats.std[k] + stats.mean[k]
            } else {
                (tok[k] - stats.mean[k]) / stats.std[k]
            };
        }
    }
    Ok(out)
}

/// Shape of one local region of the decomposition, in grid steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub t: usize,
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl RegionSpec {
    pub fn new(t: usize, x: usize, y: usize, z: usize) -> Self {
        RegionSpec { t, x, y, z }
    }

    /// Axial shorthand used by the model presets: (t, z) with x = y = 1.
    pub fn axial(t: usize, z: usize) -> Self {
        RegionSpec { t, x: 1, y: 1, z }
    }

    pub fn n_local(&self) -> usize {
        self.t * self.x * self.y * self.z
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.t, self.x, self.y, self.z]
    }
}

/// Bijection token <-> (region, slot) for one decomposition.
#[derive(Clone, Debug)]
pub struct PlacementMap {
    pub dims: GridDims,
    pub spec: RegionSpec,
    /// Region counts along each axis.
    pub blocks: [usize; 4],
    pub n_regions: usize,
    pub n_local: usize,
    /// token_index[r * n_local + s] = flat token index of slot s in region r.
    pub token_index: Vec<u32>,
    /// Local (within-region) time offset of each slot; identical pattern for
    /// every region because slots are ordered row-major over local coords.
    pub local_times: Vec<usize>,
    /// Global time offset of each region (start of its time block).
    pub region_time_offset: Vec<usize>,
}

impl PlacementMap {
    /// Global time coordinate of slot `s` in region `r`.
    pub fn slot_time(&self, r: usize, s: usize) -> usize {
        self.region_time_offset[r] + self.local_times[s]
    }
}

/// Build the token <-> (region, slot) bijection; the region shape must tile
/// the grid exactly.
pub fn placement_map(dims: GridDims, spec: RegionSpec) -> Result<PlacementMap> {
    if spec.n_local() == 0 {
        return Err(Error::invalid("region shape must be positive in every axis"));
    }
    let sizes = dims.as_array();
    let shape = spec.as_array();
    let mut blocks = [0usize; 4];
    for a in 0..4 {
        if sizes[a] % shape[a] != 0 {
            return Err(Error::invalid(format!(
                "region shape {:?} does not tile grid {:?} along axis {a} \
                 (zero-padding is not enabled)",
                shape, sizes
            )));
        }
        blocks[a] = sizes[a] / shape[a];
    }
    let n_regions = blocks.iter().product();
    let n_local = spec.n_local();
    let mut token_index = vec![0u32; n_regions * n_local];
    let mut local_times = vec![0usize; n_local];
    let mut region_time_offset = vec![0usize; n_regions];

    for s in 0..n_local {
        // row-major local coords (lt, lx, ly, lz)
        let lz = s % shape[3];
        let rem = s / shape[3];
        let ly = rem % shape[2];
        let rem = rem / shape[2];
        let lx = rem % shape[1];
        let lt = rem / shape[1];
        local_times[s] = lt;
        debug_assert!(lt < shape[0] && lx < shape[1] && ly < shape[2]);
        for r in 0..n_regions {
            let bz = r % blocks[3];
            let rem = r / blocks[3];
            let by = rem % blocks[2];
            let rem = rem / blocks[2];
            let bx = rem % blocks[1];
            let bt = rem / blocks[1];
            let t = bt * shape[0] + lt;
            let x = bx * shape[1] + lx;
            let y = by * shape[2] + ly;
            let z = bz * shape[3] + lz;
            token_index[r * n_local + s] = dims.flat(t, x, y, z) as u32;
            if s == 0 {
                region_time_offset[r] = bt * shape[0];
            }
        }
    }
    Ok(PlacementMap {
        dims,
        spec,
        blocks,
        n_regions,
        n_local,
        token_index,
        local_times,
        region_time_offset,
    })
}

/// Gather token vectors into [R, n_local, C] order.
pub fn decompose_regions(grid: &TokenGrid, map: &PlacementMap) -> Result<Vec<f64>> {
    if map.dims != grid.dims {
        return Err(Error::invalid("placement map built for a different grid"));
    }
    let c = grid.channels();
    let mut out = vec![0.0; map.token_index.len() * c];
    for (pos, &tok) in map.token_index.iter().enumerate() {
        out[pos * c..(pos + 1) * c].copy_from_slice(grid.token(tok as usize));
    }
    Ok(out)
}

/// Exact inverse of [`decompose_regions`].
pub fn recompose_regions(
    regions: &[f64],
    map: &PlacementMap,
    layout: ChannelLayout,
) -> Result<TokenGrid> {
    let c = layout.channels();
    if regions.len() != map.token_index.len() * c {
        return Err(Error::invalid("recompose: region buffer size mismatch"));
    }
    let mut grid = TokenGrid::zeros(map.dims, layout);
    for (pos, &tok) in map.token_index.iter().enumerate() {
        grid.token_mut(tok as usize)
            .copy_from_slice(&regions[pos * c..(pos + 1) * c]);
    }
    Ok(grid)
}

/// Result of the cyclic coverage validation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Strong form: every face-adjacent pair of regions in each layer is
    /// jointly covered by some region of another layer of the cycle.
    pub strong_pass: bool,
    /// Offending (layer, axis, boundary position) triples.
    pub violations: Vec<CoverageViolation>,
    /// The literal textual condition (each region's boundary meets some
    /// region of the next layer); satisfied by any covering tiling.
    pub literal_pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoverageViolation {
    pub layer: usize,
    pub axis: usize,
    pub boundary: usize,
}

/// Check that the cyclic decomposition pattern lets adjacent regions mix:
/// for every pair of face-adjacent regions in layer l there must be a region
/// in some other layer of the cycle containing at least one token of each.
pub fn validate_cyclic_coverage(specs: &[RegionSpec], dims: GridDims) -> Result<CoverageReport> {
    if specs.is_empty() {
        return Err(Error::invalid("coverage check needs at least one layer"));
    }
    let maps: Vec<PlacementMap> = specs
        .iter()
        .map(|&s| placement_map(dims, s))
        .collect::<Result<_>>()?;

    let sizes = dims.as_array();
    let mut violations = Vec::new();

    for (l, map) in maps.iter().enumerate() {
        let shape = map.spec.as_array();
        for axis in 0..4 {
            if map.blocks[axis] < 2 {
                continue; // no adjacent pairs along this axis
            }
            // Face-adjacent pairs along `axis` meet at boundaries
            // m = k * shape[axis]; the pair mixes in another layer iff that
            // layer has a region straddling the boundary, i.e. the boundary
            // is not also a region boundary of that layer. Exhaustive over
            // boundaries; all pairs at one boundary share the verdict since
            // every other layer's tiling covers the full cross-section.
            for k in 1..map.blocks[axis] {
                let m = k * shape[axis];
                debug_assert!(m < sizes[axis]);
                let mixed = maps.iter().enumerate().any(|(l2, other)| {
                    l2 != l && m % other.spec.as_array()[axis] != 0
                });
                if !mixed {
                    violations.push(CoverageViolation { layer: l, axis, boundary: m });
                }
            }
        }
    }

    Ok(CoverageReport {
        strong_pass: violations.is_empty(),
        violations,
        // every tiling covers the grid, so each region boundary token lies in
        // some region of the (cyclically) next layer
        literal_pass: true,
    })
}
