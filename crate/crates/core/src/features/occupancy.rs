use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::FeatureKind;
use crate::image_pyramid::ImagePlane;

/// Coarse boolean grid over the newest keyframe. Every point claims the 3×3
/// block of cells centred on its own cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyGrid {
    pub cell_size: usize,
    pub cols: usize,
    pub rows: usize,
    cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(width: usize, height: usize, cell_size: usize) -> Self {
        let cell_size = cell_size.max(1);
        let cols = width.div_ceil(cell_size);
        let rows = height.div_ceil(cell_size);
        Self {
            cell_size,
            cols,
            rows,
            cells: vec![false; cols * rows],
        }
    }

    pub fn clear(&mut self) {
        self.cells.iter_mut().for_each(|c| *c = false);
    }

    pub fn cell_of(&self, p: &Vector2<f64>) -> Option<(usize, usize)> {
        if !(p.x >= 0.0 && p.y >= 0.0) {
            return None;
        }
        let (cx, cy) = (p.x as usize / self.cell_size, p.y as usize / self.cell_size);
        (cx < self.cols && cy < self.rows).then_some((cx, cy))
    }

    pub fn is_occupied(&self, cx: usize, cy: usize) -> bool {
        self.cells[cy * self.cols + cx]
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    fn block(&self, cx: usize, cy: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let xs = cx.saturating_sub(1)..=(cx + 1).min(self.cols - 1);
        let ys = cy.saturating_sub(1)..=(cy + 1).min(self.rows - 1);
        ys.flat_map(move |y| xs.clone().map(move |x| (x, y)))
    }

    /// True when every cell of the 3×3 block around `p` is free.
    pub fn block_free(&self, p: &Vector2<f64>) -> bool {
        match self.cell_of(p) {
            Some((cx, cy)) => self.block(cx, cy).all(|(x, y)| !self.is_occupied(x, y)),
            None => false,
        }
    }

    /// Marks the 3×3 block around `p`; returns false if `p` is outside.
    pub fn mark(&mut self, p: &Vector2<f64>) -> bool {
        let Some((cx, cy)) = self.cell_of(p) else {
            return false;
        };
        let cells: Vec<_> = self.block(cx, cy).collect();
        for (x, y) in cells {
            self.cells[y * self.cols + x] = true;
        }
        true
    }

    /// Squared Euclidean distance (in cells) from every cell to the nearest
    /// occupied cell; `f64::INFINITY` everywhere on an empty grid.
    fn distance_field(&self) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.cells.len()];
        for (i, _) in self.cells.iter().enumerate().filter(|(_, &c)| c) {
            self.lower_distances(&mut dist, i % self.cols, i / self.cols);
        }
        dist
    }

    fn lower_distances(&self, dist: &mut [f64], ox: usize, oy: usize) {
        for y in 0..self.rows {
            for x in 0..self.cols {
                let (dx, dy) = (x as f64 - ox as f64, y as f64 - oy as f64);
                let d = dx * dx + dy * dy;
                let slot = &mut dist[y * self.cols + x];
                if d < *slot {
                    *slot = d;
                }
            }
        }
    }
}

/// Clears the grid and marks the block of every point inside the image.
pub fn update_occupancy(grid: &mut OccupancyGrid, points: impl IntoIterator<Item = Vector2<f64>>) {
    grid.clear();
    for p in points {
        grid.mark(&p);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    /// Multiplier on the block-median gradient magnitude.
    pub g_th: f64,
    /// Lower bound of the adaptive threshold (intensity/px).
    pub gradient_floor: f64,
    /// Side of the square blocks over which the median is taken.
    pub region_size: usize,
    /// Pixels closer than this to a detected corner are skipped.
    pub corner_exclusion: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            g_th: 1.5,
            gradient_floor: 7.0,
            region_size: 32,
            corner_exclusion: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCandidate {
    pub p: Vector2<f64>,
    pub gradient: f64,
}

fn region_thresholds(plane: &ImagePlane, cfg: &SamplingConfig) -> (usize, Vec<f64>) {
    let rs = cfg.region_size.max(1);
    let (bw, bh) = (plane.width.div_ceil(rs), plane.height.div_ceil(rs));
    let mut out = Vec::with_capacity(bw * bh);
    let mut buf = Vec::with_capacity(rs * rs);
    for by in 0..bh {
        for bx in 0..bw {
            buf.clear();
            for v in by * rs..((by + 1) * rs).min(plane.height) {
                for u in bx * rs..((bx + 1) * rs).min(plane.width) {
                    buf.push(plane.gradient_magnitude(u, v));
                }
            }
            let mid = buf.len() / 2;
            let median = *buf.select_nth_unstable_by(mid, f64::total_cmp).1;
            out.push((median * cfg.g_th).max(cfg.gradient_floor));
        }
    }
    (bw, out)
}

/// Picks up to `budget` high-gradient pixels in free cells, at least
/// `corner_exclusion` px from every corner. Each cell offers its strongest
/// pixel; offers are taken strongest first and each claims its 3×3 block.
pub fn sample_pixel_candidates(
    plane: &ImagePlane,
    grid: &mut OccupancyGrid,
    corners: &[Vector2<f64>],
    budget: usize,
    cfg: &SamplingConfig,
) -> Vec<PixelCandidate> {
    if budget == 0 {
        return Vec::new();
    }
    let (bw, thresholds) = region_thresholds(plane, cfg);
    let rs = cfg.region_size.max(1);
    let ex2 = cfg.corner_exclusion * cfg.corner_exclusion;
    // the residual pattern reaches 2 px, bilinear sampling needs one more
    let margin = 4;
    let mut buckets: Vec<Vec<Vector2<f64>>> = vec![Vec::new(); grid.cols * grid.rows];
    for c in corners {
        if let Some((x, y)) = grid.cell_of(c) {
            buckets[y * grid.cols + x].push(*c);
        }
    }
    let reach = (cfg.corner_exclusion / grid.cell_size as f64).ceil() as usize + 1;
    let mut offers: Vec<(f64, PixelCandidate)> = Vec::new();
    let mut near = Vec::new();
    for cy in 0..grid.rows {
        for cx in 0..grid.cols {
            if grid.is_occupied(cx, cy) {
                continue;
            }
            near.clear();
            for y in cy.saturating_sub(reach)..(cy + reach + 1).min(grid.rows) {
                for x in cx.saturating_sub(reach)..(cx + reach + 1).min(grid.cols) {
                    near.extend_from_slice(&buckets[y * grid.cols + x]);
                }
            }
            let mut best: Option<(f64, PixelCandidate)> = None;
            let v0 = (cy * grid.cell_size).max(margin);
            let v1 = ((cy + 1) * grid.cell_size).min(plane.height.saturating_sub(margin));
            let u0 = (cx * grid.cell_size).max(margin);
            let u1 = ((cx + 1) * grid.cell_size).min(plane.width.saturating_sub(margin));
            for v in v0..v1 {
                for u in u0..u1 {
                    let g = plane.gradient_magnitude(u, v);
                    let th = thresholds[(v / rs) * bw + u / rs];
                    if g <= th {
                        continue;
                    }
                    let p = Vector2::new(u as f64, v as f64);
                    if near.iter().any(|c| (c - p).norm_squared() < ex2) {
                        continue;
                    }
                    let ratio = g / th;
                    if best.is_none_or(|(r, _)| ratio > r) {
                        best = Some((ratio, PixelCandidate { p, gradient: g }));
                    }
                }
            }
            offers.extend(best);
        }
    }
    offers.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    for (_, cand) in offers {
        if out.len() == budget {
            break;
        }
        if grid.block_free(&cand.p) {
            grid.mark(&cand.p);
            out.push(cand);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActivationCandidate {
    pub p: Vector2<f64>,
    pub kind: FeatureKind,
    /// Saliency for corners; ignored for pixels.
    pub score: f64,
}

/// Two-stage activation. Corners go first by descending score; pixels then
/// fill the grid greedily, each time taking the candidate farthest from any
/// occupied cell. Returns the indices of activated candidates in activation
/// order.
pub fn activate_features(
    candidates: &[ActivationCandidate],
    grid: &mut OccupancyGrid,
    corner_quota: usize,
    pixel_quota: usize,
) -> Vec<usize> {
    let mut activated = Vec::new();
    let mut corners: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].kind == FeatureKind::Corner)
        .collect();
    corners.sort_by(|&a, &b| candidates[b].score.total_cmp(&candidates[a].score).then(a.cmp(&b)));
    let mut placed = 0;
    for i in corners {
        if placed == corner_quota {
            break;
        }
        if grid.block_free(&candidates[i].p) {
            grid.mark(&candidates[i].p);
            activated.push(i);
            placed += 1;
        }
    }

    let mut pixels: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].kind == FeatureKind::Pixel && grid.cell_of(&candidates[i].p).is_some())
        .collect();
    let mut dist = grid.distance_field();
    for _ in 0..pixel_quota {
        pixels.retain(|&i| grid.block_free(&candidates[i].p));
        let best = pixels.iter().copied().max_by(|&a, &b| {
            let da = cell_distance(grid, &dist, &candidates[a].p);
            let db = cell_distance(grid, &dist, &candidates[b].p);
            // earlier candidates win ties
            da.total_cmp(&db).then(b.cmp(&a))
        });
        let Some(i) = best else { break };
        let p = candidates[i].p;
        grid.mark(&p);
        let (cx, cy) = grid.cell_of(&p).expect("checked above");
        let block: Vec<_> = grid.block(cx, cy).collect();
        for (x, y) in block {
            grid.lower_distances(&mut dist, x, y);
        }
        activated.push(i);
    }
    activated
}

fn cell_distance(grid: &OccupancyGrid, dist: &[f64], p: &Vector2<f64>) -> f64 {
    let (cx, cy) = grid.cell_of(p).expect("inside grid");
    dist[cy * grid.cols + cx]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_pyramid::IntensityImage;

    fn chebyshev(g: &OccupancyGrid, a: &Vector2<f64>, b: &Vector2<f64>) -> usize {
        let (ax, ay) = g.cell_of(a).unwrap();
        let (bx, by) = g.cell_of(b).unwrap();
        ax.abs_diff(bx).max(ay.abs_diff(by))
    }

    #[test]
    fn grid_dimensions_and_marking() {
        let mut g = OccupancyGrid::new(95, 40, 10);
        assert_eq!((g.cols, g.rows), (10, 4));
        update_occupancy(&mut g, []);
        assert_eq!(g.occupied_count(), 0);
        update_occupancy(&mut g, [Vector2::new(47.0, 20.0)]);
        assert_eq!(g.occupied_count(), 9);
        update_occupancy(&mut g, [Vector2::new(-1.0, 20.0), Vector2::new(47.0, 400.0)]);
        assert_eq!(g.occupied_count(), 0);
        // blocks are clipped at the border
        assert!(g.mark(&Vector2::new(0.0, 0.0)));
        assert_eq!(g.occupied_count(), 4);
    }

    #[test]
    fn constant_image_and_full_grid_give_nothing() {
        let plane = ImagePlane::from_image(IntensityImage::from_fn(96, 96, |_, _| 80.0));
        let mut g = OccupancyGrid::new(96, 96, 10);
        assert!(sample_pixel_candidates(&plane, &mut g, &[], 20, &SamplingConfig::default()).is_empty());

        let edge = ImagePlane::from_image(IntensityImage::from_fn(96, 96, |u, _| if u < 48 { 20.0 } else { 200.0 }));
        let mut full = OccupancyGrid::new(96, 96, 10);
        for v in (0..96).step_by(10) {
            for u in (0..96).step_by(10) {
                full.mark(&Vector2::new(u as f64, v as f64));
            }
        }
        assert!(sample_pixel_candidates(&edge, &mut full, &[], 20, &SamplingConfig::default()).is_empty());
    }

    #[test]
    fn step_edge_samples_lie_on_the_edge() {
        let plane = ImagePlane::from_image(IntensityImage::from_fn(160, 160, |u, _| if u < 80 { 20.0 } else { 200.0 }));
        let mut g = OccupancyGrid::new(160, 160, 10);
        let s = sample_pixel_candidates(&plane, &mut g, &[], 20, &SamplingConfig::default());
        assert!(!s.is_empty());
        for (i, a) in s.iter().enumerate() {
            assert!((a.p.x - 79.5).abs() <= 1.5, "{:?}", a.p);
            for b in &s[i + 1..] {
                assert!(chebyshev(&g, &a.p, &b.p) >= 3);
            }
        }
        // corners exclude their neighbourhood
        let mut g2 = OccupancyGrid::new(160, 160, 10);
        let corners: Vec<_> = (0..160).map(|v| Vector2::new(80.0, v as f64)).collect();
        let s2 = sample_pixel_candidates(&plane, &mut g2, &corners, 20, &SamplingConfig::default());
        assert!(s2.iter().all(|c| corners.iter().all(|k| (k - c.p).norm() >= 3.0)));
    }

    fn cand(x: f64, y: f64, kind: FeatureKind, score: f64) -> ActivationCandidate {
        ActivationCandidate {
            p: Vector2::new(x, y),
            kind,
            score,
        }
    }

    #[test]
    fn same_cell_corners_keep_the_stronger() {
        let mut g = OccupancyGrid::new(100, 100, 10);
        let c = [
            cand(52.0, 52.0, FeatureKind::Corner, 10.0),
            cand(55.0, 57.0, FeatureKind::Corner, 90.0),
        ];
        assert_eq!(activate_features(&c, &mut g, 10, 10), vec![1]);
    }

    #[test]
    fn spread_candidates_all_activate() {
        let mut g = OccupancyGrid::new(200, 200, 10);
        let mut c = Vec::new();
        for k in 0..20 {
            let (x, y) = (15.0 + 40.0 * (k % 5) as f64, 15.0 + 40.0 * (k / 5) as f64);
            let kind = if k % 2 == 0 { FeatureKind::Corner } else { FeatureKind::Pixel };
            c.push(cand(x, y, kind, k as f64));
        }
        let a = activate_features(&c, &mut g, 10, 10);
        assert_eq!(a.len(), 20);
        for (i, &x) in a.iter().enumerate() {
            for &y in &a[i + 1..] {
                assert!(chebyshev(&g, &c[x].p, &c[y].p) >= 3);
            }
        }
    }

    #[test]
    fn corners_take_priority_over_pixels() {
        let mut g = OccupancyGrid::new(100, 100, 10);
        let c = [
            cand(50.0, 50.0, FeatureKind::Pixel, 0.0),
            cand(50.0, 50.0, FeatureKind::Corner, 1.0),
        ];
        assert_eq!(activate_features(&c, &mut g, 5, 5), vec![1]);
    }

    #[test]
    fn pixels_prefer_empty_regions() {
        let mut g = OccupancyGrid::new(200, 100, 10);
        g.mark(&Vector2::new(5.0, 50.0));
        let c = [
            cand(45.0, 50.0, FeatureKind::Pixel, 0.0),
            cand(195.0, 50.0, FeatureKind::Pixel, 0.0),
        ];
        assert_eq!(activate_features(&c, &mut g, 0, 1), vec![1]);
    }
}
