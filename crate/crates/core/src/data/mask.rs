//! Ground-truth mask extraction from depth maps.

use crate::error::{Error, Result};

/// Thresholds a depth map into a binary hand mask.
///
/// A pixel is foreground when `near_mm <= depth <= far_mm`; depth 0 is
/// invalid and never foreground. Connected components (4-neighborhood)
/// smaller than `min_area_px` are removed to suppress thresholding noise.
/// An all-invalid depth map yields an empty mask, not an error.
pub fn depth_to_mask(
    depth: &[u16],
    width: usize,
    height: usize,
    near_mm: u16,
    far_mm: u16,
    min_area_px: usize,
) -> Result<Vec<u8>> {
    if near_mm >= far_mm {
        return Err(Error::InvalidArgument(format!(
            "depth window requires near < far, got ({near_mm}, {far_mm})"
        )));
    }
    if depth.len() != width * height {
        return Err(Error::Shape(format!(
            "depth buffer has {} values for {width}x{height}",
            depth.len()
        )));
    }
    let mut mask: Vec<u8> = depth
        .iter()
        .map(|&d| u8::from(d != 0 && d >= near_mm && d <= far_mm))
        .collect();

    if min_area_px <= 1 {
        return Ok(mask);
    }

    // Flood-fill labeling in scan order; small components are erased.
    let mut visited = vec![false; mask.len()];
    let mut component = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for start in 0..mask.len() {
        if mask[start] == 0 || visited[start] {
            continue;
        }
        component.clear();
        queue.push_back(start);
        visited[start] = true;
        while let Some(p) = queue.pop_front() {
            component.push(p);
            let (x, y) = (p % width, p / width);
            let mut push = |q: usize| {
                if mask[q] == 1 && !visited[q] {
                    visited[q] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < width {
                push(p + 1);
            }
            if y > 0 {
                push(p - width);
            }
            if y + 1 < height {
                push(p + width);
            }
        }
        if component.len() < min_area_px {
            for &p in &component {
                mask[p] = 0;
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_rule() {
        // window (100, 500): 300 in, 700 out, 0 invalid
        let mask = depth_to_mask(&[300, 700, 0], 3, 1, 100, 500, 0).unwrap();
        assert_eq!(mask, vec![1, 0, 0]);
    }

    #[test]
    fn uniform_in_window_is_all_ones() {
        let depth = vec![200u16; 12];
        let mask = depth_to_mask(&depth, 4, 3, 100, 500, 1).unwrap();
        assert_eq!(mask, vec![1; 12]);
    }

    #[test]
    fn all_invalid_yields_empty_mask() {
        let depth = vec![0u16; 9];
        let mask = depth_to_mask(&depth, 3, 3, 100, 500, 4).unwrap();
        assert_eq!(mask, vec![0; 9]);
    }

    #[test]
    fn bad_window_rejected() {
        assert!(depth_to_mask(&[0], 1, 1, 500, 100, 0).is_err());
    }

    #[test]
    fn small_components_removed() {
        // 30x20 image: a 3-px blob and a solid 20x15 block (300 px).
        let (w, h) = (30, 20);
        let mut depth = vec![1500u16; w * h];
        depth[2 * w + 2] = 300;
        depth[2 * w + 3] = 300;
        depth[3 * w + 2] = 300;
        for y in 4..19 {
            for x in 8..28 {
                depth[y * w + x] = 300;
            }
        }
        let mask = depth_to_mask(&depth, w, h, 100, 500, 50).unwrap();
        assert_eq!(mask[2 * w + 2], 0, "3-px component must be removed");
        assert_eq!(mask[10 * w + 10], 1, "large component must survive");
        let area: usize = mask.iter().map(|&v| v as usize).sum();
        assert_eq!(area, 20 * 15);
    }

    #[test]
    fn idempotent_and_deterministic() {
        let depth: Vec<u16> = (0..100).map(|i| if i % 7 == 0 { 300 } else { 900 }).collect();
        let a = depth_to_mask(&depth, 10, 10, 100, 500, 2).unwrap();
        let b = depth_to_mask(&depth, 10, 10, 100, 500, 2).unwrap();
        assert_eq!(a, b);
    }
}
