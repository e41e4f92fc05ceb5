//! Merge-trace rendering: which original patches each kept token absorbed.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::ppm::{write_ppm, RgbImage};
use crate::model::ForwardTrace;

/// Pixel size of one patch cell in rendered frames.
pub const CELL_PX: usize = 16;

/// Patch partition after one prune layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergeVizFrame {
    pub layer: usize,
    pub grid: (usize, usize),
    /// Group id of every patch, row-major; a group is named by its smallest patch id.
    pub group_of_patch: Vec<usize>,
}

impl MergeVizFrame {
    pub fn group_count(&self) -> usize {
        self.group_of_patch.iter().collect::<BTreeSet<_>>().len()
    }

    /// Paints each patch cell with its group's palette color.
    pub fn render(&self, palette: &[[u8; 3]], cell: usize, background: Option<&RgbImage>) -> RgbImage {
        let (gh, gw) = self.grid;
        let mut img = RgbImage::new(gw * cell, gh * cell);
        let bg = background.map(|b| b.resized(img.width, img.height));
        for y in 0..img.height {
            for x in 0..img.width {
                let mut c = palette[self.group_of_patch[(y / cell) * gw + x / cell]];
                if let Some(bg) = &bg {
                    let p = bg.get(x, y);
                    for ch in 0..3 {
                        c[ch] = ((c[ch] as u16 + p[ch] as u16) / 2) as u8;
                    }
                }
                img.put(x, y, c);
            }
        }
        img
    }
}

/// `n` pairwise-distinct colors drawn from a seeded stream.
pub fn palette(seed: u64, n: usize) -> Vec<[u8; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let c: [u8; 3] = rng.random();
        if seen.insert(c) {
            out.push(c);
        }
    }
    out
}

/// One frame per prune event, in layer order.
pub fn merge_frames(trace: &ForwardTrace, grid: (usize, usize)) -> Result<Vec<MergeVizFrame>> {
    if trace.prune_events.is_empty() {
        return Err(Error::Parameter("trace has no prune events to visualize".into()));
    }
    let patches = grid.0 * grid.1;
    trace
        .prune_events
        .iter()
        .map(|ev| {
            let mut group_of_patch = vec![usize::MAX; patches];
            for ids in &ev.outcome.group_provenance {
                let Some(&root) = ids.iter().min() else { continue };
                for &p in ids {
                    if p >= patches || group_of_patch[p] != usize::MAX {
                        return Err(Error::Parameter(format!(
                            "layer {}: patch {} is out of range or claimed twice",
                            ev.layer, p
                        )));
                    }
                    group_of_patch[p] = root;
                }
            }
            if let Some(p) = group_of_patch.iter().position(|&g| g == usize::MAX) {
                return Err(Error::Parameter(format!("layer {}: patch {} belongs to no group", ev.layer, p)));
            }
            Ok(MergeVizFrame {
                layer: ev.layer,
                grid,
                group_of_patch,
            })
        })
        .collect()
}

/// Writes `merge_layerNN.ppm` for every prune layer and returns the paths.
pub fn render_merge_trace(
    trace: &ForwardTrace,
    grid: (usize, usize),
    out_dir: impl AsRef<Path>,
    palette_seed: u64,
    background: Option<&RgbImage>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    let frames = merge_frames(trace, grid)?;
    let colors = palette(palette_seed, grid.0 * grid.1);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    frames
        .iter()
        .map(|f| {
            let path = out_dir.join(format!("merge_layer{:02}.ppm", f.layer));
            write_ppm(&path, &f.render(&colors, CELL_PX, background))?;
            Ok(path)
        })
        .collect()
}
