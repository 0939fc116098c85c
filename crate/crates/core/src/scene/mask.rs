//! Binary image masks: orthographic rendering along grid `+z`, sprite
//! placement, occlusion binning and PGM (P5) files.

use std::fs;
use std::path::Path;

use crate::error::{check_same_resolution, Error, Result};
use crate::grid::SdfGrid;

/// Square binary image, row-major with rows along grid `y` and columns
/// along grid `x`. Values are 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask2D {
    width: usize,
    data: Vec<u8>,
}

impl Mask2D {
    pub fn new(width: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || data.len() != width * width {
            return Err(Error::DimensionMismatch {
                expected: width * width,
                got: data.len(),
            });
        }
        if data.iter().any(|v| *v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self { width, data })
    }

    pub fn blank(width: usize) -> Self {
        Self {
            width,
            data: vec![0; width * width],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Tight bounding box `(x0, y0, x1, y1)`, half-open, of set pixels.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let w = self.width;
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..w {
            for x in 0..w {
                if self.get(x, y) {
                    b = Some(match b {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        b
    }

    /// `self ⊆ other` pixelwise.
    pub fn is_subset_of(&self, other: &Mask2D) -> bool {
        self.width == other.width && self.data.iter().zip(&other.data).all(|(a, b)| *a <= *b)
    }

    pub fn intersection_count(&self, other: &Mask2D) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a != 0 && **b != 0).count()
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.width).into_bytes();
        out.extend(self.data.iter().map(|v| v * 255));
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format(path, "truncated PGM header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        pos += 1;
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(path, "bad PGM header"));
        if fields[0] != "P5" || num(&fields[3])? != 255 {
            return Err(Error::format(path, "expected an 8-bit P5 image"));
        }
        let (w, h) = (num(&fields[1])?, num(&fields[2])?);
        if w != h || bytes.len() < pos || bytes.len() - pos != w * h {
            return Err(Error::format(path, "mask must be square with w*h bytes"));
        }
        let data = bytes[pos..]
            .iter()
            .map(|v| match v {
                0 => Ok(0),
                255 => Ok(1),
                _ => Err(Error::format(path, "mask pixel not 0 or 255")),
            })
            .collect::<Result<Vec<u8>>>()?;
        Mask2D::new(w, data)
    }
}

/// Object (full and visible) and visible-hand silhouettes seen along `+z`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneMasks {
    pub object_full: Mask2D,
    pub object_visible: Mask2D,
    pub hand: Mask2D,
}

fn first_hit(grid: &SdfGrid, i: usize, j: usize) -> Option<usize> {
    (0..grid.resolution()).find(|k| grid.get(i, j, *k) < 0.0)
}

/// Orthographic masks at `W = s * R` pixels: each voxel column covers an
/// `s x s` pixel block. The front-most (smallest `z`) interior voxel
/// decides visibility, with ties going to the hand.
pub fn render_masks(object: &SdfGrid, hand: Option<&SdfGrid>, width: usize) -> Result<SceneMasks> {
    let r = object.resolution();
    if let Some(h) = hand {
        check_same_resolution(r, h.resolution())?;
    }
    if width == 0 || width % r != 0 {
        return Err(Error::InvalidArgument(format!("canvas {width} is not a multiple of R = {r}")));
    }
    let s = width / r;
    let mut full = Mask2D::blank(width);
    let mut vis = Mask2D::blank(width);
    let mut hm = Mask2D::blank(width);
    for j in 0..r {
        for i in 0..r {
            let ko = first_hit(object, i, j);
            let kh = hand.and_then(|h| first_hit(h, i, j));
            let (f, v, hv) = match (ko, kh) {
                (Some(o), Some(h)) => (true, o < h, h <= o),
                (Some(_), None) => (true, true, false),
                (None, Some(_)) => (false, false, true),
                (None, None) => (false, false, false),
            };
            for y in j * s..(j + 1) * s {
                for x in i * s..(i + 1) * s {
                    full.set(x, y, f);
                    vis.set(x, y, v);
                    hm.set(x, y, hv);
                }
            }
        }
    }
    Ok(SceneMasks {
        object_full: full,
        object_visible: vis,
        hand: hm,
    })
}

/// Pixel box of a voxel-space bounding box `(i0, j0, i1, j1)`, half-open.
fn pixel_box(bbox: (usize, usize, usize, usize), r: usize, w: usize) -> Result<(usize, usize, usize, usize)> {
    let (i0, j0, i1, j1) = bbox;
    if w == 0 || w % r != 0 {
        return Err(Error::InvalidArgument(format!("canvas {w} is not a multiple of R = {r}")));
    }
    if i0 >= i1 || j0 >= j1 || i1 > r || j1 > r {
        return Err(Error::InvalidArgument(format!("bad voxel bbox {bbox:?} for R = {r}")));
    }
    let s = w / r;
    Ok((i0 * s, j0 * s, i1 * s, j1 * s))
}

/// Crops `mask` to its set pixels, rescales the crop uniformly with
/// nearest-neighbor sampling to fit the pixel box of `bbox` (voxel indices,
/// half-open) and pastes it centered in that box on a blank `W x W` canvas.
pub fn sprite_place(mask: &Mask2D, bbox: (usize, usize, usize, usize), r: usize, w: usize) -> Result<Mask2D> {
    let (x0, y0, x1, y1) = mask
        .bbox()
        .ok_or_else(|| Error::Empty("sprite mask has no set pixels".into()))?;
    let (px0, py0, px1, py1) = pixel_box(bbox, r, w)?;
    let (cw, ch) = (x1 - x0, y1 - y0);
    let (bw, bh) = (px1 - px0, py1 - py0);
    let scale = (bw as f64 / cw as f64).min(bh as f64 / ch as f64);
    let ow = ((cw as f64 * scale).round() as usize).clamp(1, bw);
    let oh = ((ch as f64 * scale).round() as usize).clamp(1, bh);
    let (ox, oy) = (px0 + (bw - ow) / 2, py0 + (bh - oh) / 2);
    let mut out = Mask2D::blank(w);
    for y in 0..oh {
        let sy = (((y as f64 + 0.5) / scale) as usize).min(ch - 1);
        for x in 0..ow {
            let sx = (((x as f64 + 0.5) / scale) as usize).min(cw - 1);
            if mask.get(x0 + sx, y0 + sy) {
                out.set(ox + x, oy + y, true);
            }
        }
    }
    Ok(out)
}

/// Places a mask rendered at one pixel per voxel onto a `W x W` canvas,
/// using its own voxel bounding box. Empty masks stay empty.
pub fn place_voxel_mask(mask: &Mask2D, w: usize) -> Result<Mask2D> {
    match mask.bbox() {
        None => Ok(Mask2D::blank(w)),
        Some(b) => sprite_place(mask, b, mask.width(), w),
    }
}

/// Occluded fraction `x = 1 - |visible| / |full|` and its 1-based bin among
/// `k` equal-width bins (the last bin is closed).
pub fn occlusion_bin(visible: &Mask2D, full: &Mask2D, k: usize) -> Result<(f64, usize)> {
    if k == 0 {
        return Err(Error::InvalidArgument("bin count must be > 0".into()));
    }
    let n = full.count();
    if n == 0 {
        return Err(Error::Empty("full object mask is empty".into()));
    }
    let x = 1.0 - visible.count() as f64 / n as f64;
    Ok((x, bin_of(x, k)))
}

pub fn bin_of(x: f64, k: usize) -> usize {
    ((x * k as f64).floor() as usize + 1).min(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{analytic_sdf, Posed, Solid, Vec3};

    fn grid(s: Solid, r: usize) -> SdfGrid {
        analytic_sdf(&s, r).unwrap()
    }

    #[test]
    fn no_hand_means_fully_visible() {
        let o = grid(Solid::single(Posed::sphere(Vec3::zeros(), 0.5)), 16);
        let m = render_masks(&o, None, 32).unwrap();
        assert_eq!(m.object_visible, m.object_full);
        assert!(m.hand.is_empty());
        assert_eq!(occlusion_bin(&m.object_visible, &m.object_full, 5).unwrap(), (0.0, 1));
    }

    #[test]
    fn slab_in_front_hides_everything() {
        let o = grid(Solid::single(Posed::sphere(Vec3::new(0.0, 0.0, 0.3), 0.4)), 16);
        let h = grid(Solid::single(Posed::aabb(Vec3::new(0.0, 0.0, -0.7), Vec3::new(0.95, 0.95, 0.1))), 16);
        let m = render_masks(&o, Some(&h), 32).unwrap();
        assert!(m.object_visible.is_empty());
        assert_eq!(occlusion_bin(&m.object_visible, &m.object_full, 5).unwrap(), (1.0, 5));
        assert_eq!(m.object_visible.intersection_count(&m.hand), 0);
    }

    #[test]
    fn half_covering_slab_occludes_half() {
        for w in [32, 64] {
            let o = grid(Solid::single(Posed::sphere(Vec3::new(0.0, 0.0, 0.3), 0.5)), 32);
            let h = grid(Solid::single(Posed::aabb(Vec3::new(-0.5, 0.0, -0.6), Vec3::new(0.5, 0.9, 0.1))), 32);
            let m = render_masks(&o, Some(&h), w).unwrap();
            let (x, _) = occlusion_bin(&m.object_visible, &m.object_full, 5).unwrap();
            assert!((x - 0.5).abs() <= 2.0 / w as f64, "W={w}: x={x}");
            assert!(m.object_visible.is_subset_of(&m.object_full));
        }
    }

    #[test]
    fn binning_edges() {
        assert_eq!(bin_of(0.55, 5), 3);
        assert_eq!(bin_of(0.0, 5), 1);
        assert_eq!(bin_of(1.0, 5), 5);
        assert_eq!(bin_of(0.2, 5), 2);
        assert!(occlusion_bin(&Mask2D::blank(4), &Mask2D::blank(4), 5).is_err());
    }

    #[test]
    fn sprite_of_full_mask_is_identity() {
        let m = Mask2D::new(8, vec![1; 64]).unwrap();
        assert_eq!(sprite_place(&m, (0, 0, 8, 8), 8, 8).unwrap(), m);
    }

    #[test]
    fn small_sprite_scales_by_integer_factor() {
        let mut m = Mask2D::blank(8);
        m.set(3, 4, true);
        m.set(4, 4, true);
        m.set(3, 5, true);
        // 2x2 crop into a 2x2 voxel box at 16 px per voxel: factor 16
        let out = sprite_place(&m, (1, 1, 3, 3), 8, 128).unwrap();
        assert_eq!(out.bbox(), Some((16, 16, 48, 48)));
        assert_eq!(out.count(), 3 * 16 * 16);
        assert!(out.get(16, 16) && out.get(47, 16) && out.get(16, 47) && !out.get(47, 47));
        assert!(out.data().iter().all(|v| *v <= 1));
    }

    #[test]
    fn sprite_keeps_aspect_and_centers() {
        let mut m = Mask2D::blank(8);
        for x in 0..4 {
            m.set(x, 0, true);
        }
        // 4x1 crop into a 4x4 voxel box at 2 px per voxel: 8x2 pixels, centered vertically
        let out = sprite_place(&m, (0, 0, 4, 4), 8, 16).unwrap();
        assert_eq!(out.bbox(), Some((0, 3, 8, 5)));
        assert!(sprite_place(&Mask2D::blank(8), (0, 0, 4, 4), 8, 16).is_err());
        assert!(sprite_place(&m, (0, 0, 9, 4), 8, 16).is_err());
    }

    #[test]
    fn occlusion_is_canvas_invariant_after_placement() {
        let o = grid(Solid::single(Posed::sphere(Vec3::new(0.1, 0.0, 0.3), 0.45)), 16);
        let h = grid(Solid::single(Posed::capsule(Vec3::new(-0.8, -0.3, -0.5), Vec3::new(0.5, 0.4, -0.5), 0.2)), 16);
        let base = render_masks(&o, Some(&h), 16).unwrap();
        let (x0, _) = occlusion_bin(&base.object_visible, &base.object_full, 5).unwrap();
        for w in [32, 48, 64] {
            let full = place_voxel_mask(&base.object_full, w).unwrap();
            let vis = place_voxel_mask(&base.object_visible, w).unwrap();
            let (x, _) = occlusion_bin(&vis, &full, 5).unwrap();
            assert!((x - x0).abs() <= 2.0 / w as f64, "W={w}");
        }
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Mask2D::blank(5);
        m.set(1, 2, true);
        m.set(4, 4, true);
        let p = dir.path().join("m.pgm");
        m.write_pgm(&p).unwrap();
        assert_eq!(Mask2D::read_pgm(&p).unwrap(), m);
        std::fs::write(&p, b"P5\n5 5\n255\n\x07").unwrap();
        assert!(Mask2D::read_pgm(&p).is_err());
    }
}
