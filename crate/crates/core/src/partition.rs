//! Spatial partitioning of a scene into training blocks. Cameras are split
//! into a grid of equal-count groups by ground position, each block takes the
//! midpoint-bounded cell around its cameras, and blocks are then padded and
//! assigned the views and sparse points that actually observe them.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Rect2;
use crate::scalar::Scalar;
use crate::scene::{CameraView, SfmScene};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionConfig {
    /// Number of splits along the ground x axis.
    pub columns: usize,
    /// Number of splits along the ground y axis within each column.
    pub rows: usize,
    /// Views kept per block; defaults to twice the per-block camera share.
    pub views_per_block: Option<usize>,
    /// Fractional padding added to each side of a block's core bounds.
    pub expand_ratio: f64,
    /// Fraction of the image around its center that counts for view scores.
    pub center_fraction: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            columns: 2,
            rows: 2,
            views_per_block: None,
            expand_ratio: 0.2,
            center_fraction: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBlock<T: Scalar> {
    pub id: u32,
    /// Midpoint-bounded cell; cores of all blocks tile the scene rectangle.
    pub core: Rect2<T>,
    /// Core padded by the expand ratio; training uses everything inside.
    pub expanded: Rect2<T>,
    pub view_ids: Vec<u32>,
    pub point_ids: Vec<u64>,
}

/// Bounding rectangle of the camera ground positions.
pub fn scene_ground_rect<T: Scalar>(scene: &SfmScene<T>) -> Result<Rect2<T>> {
    let positions = scene.camera_ground_positions();
    Rect2::from_points(positions.iter())
        .ok_or_else(|| Error::Invalid("scene has no cameras".into()))
}

/// Splits `count` items into `groups` contiguous runs whose sizes differ by
/// at most one, larger runs first.
fn group_sizes(count: usize, groups: usize) -> Vec<usize> {
    let base = count / groups;
    let extra = count % groups;
    (0..groups).map(|i| base + usize::from(i < extra)).collect()
}

/// How well a view observes a point set: the number of points that project
/// into the centered fraction of the image, in front of the camera.
pub fn score_viewpoint<T: Scalar>(
    view: &CameraView<T>,
    points: &[Vector3<T>],
    center_fraction: f64,
) -> usize {
    let w = view.width as f64;
    let h = view.height as f64;
    let half_w = 0.5 * center_fraction * w;
    let half_h = 0.5 * center_fraction * h;
    let (u_lo, u_hi) = (T::of(0.5 * w - half_w), T::of(0.5 * w + half_w));
    let (v_lo, v_hi) = (T::of(0.5 * h - half_h), T::of(0.5 * h + half_h));
    points
        .iter()
        .filter(|p| {
            view.project(p).is_some_and(|proj| {
                proj.u >= u_lo && proj.u <= u_hi && proj.v >= v_lo && proj.v <= v_hi
            })
        })
        .count()
}

pub fn partition_scene<T: Scalar>(
    scene: &SfmScene<T>,
    cfg: &PartitionConfig,
) -> Result<Vec<SceneBlock<T>>> {
    if cfg.columns == 0 || cfg.rows == 0 {
        return Err(Error::Config("partition grid must have at least one cell".into()));
    }
    let n = scene.views.len();
    if n < cfg.columns * cfg.rows {
        return Err(Error::Config(format!(
            "{} cameras cannot fill a {}x{} block grid",
            n, cfg.columns, cfg.rows
        )));
    }
    let rect = scene_ground_rect(scene)?;
    let ground = scene.camera_ground_positions();

    // Column groups: sort by ground x, ties by view id for determinism.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        ground[a]
            .x
            .partial_cmp(&ground[b].x)
            .unwrap()
            .then_with(|| scene.views[a].id.cmp(&scene.views[b].id))
    });
    let col_sizes = group_sizes(n, cfg.columns);
    let mut columns: Vec<Vec<usize>> = Vec::with_capacity(cfg.columns);
    let mut cursor = 0;
    for size in &col_sizes {
        columns.push(order[cursor..cursor + size].to_vec());
        cursor += size;
    }

    // Split coordinates sit midway between the extreme cameras of adjacent
    // groups; the outermost edges come from the scene rectangle.
    let half = T::of(0.5);
    let mut x_edges = Vec::with_capacity(cfg.columns + 1);
    x_edges.push(rect.min.x);
    for i in 0..cfg.columns - 1 {
        let hi = ground[*columns[i].last().unwrap()].x;
        let lo = ground[columns[i + 1][0]].x;
        x_edges.push((hi + lo) * half);
    }
    x_edges.push(rect.max.x);

    let mut blocks = Vec::with_capacity(cfg.columns * cfg.rows);
    for (ci, column) in columns.iter_mut().enumerate() {
        column.sort_by(|&a, &b| {
            ground[a]
                .y
                .partial_cmp(&ground[b].y)
                .unwrap()
                .then_with(|| scene.views[a].id.cmp(&scene.views[b].id))
        });
        let row_sizes = group_sizes(column.len(), cfg.rows);
        let mut y_edges = Vec::with_capacity(cfg.rows + 1);
        y_edges.push(rect.min.y);
        let mut cursor = 0;
        for i in 0..cfg.rows - 1 {
            let group = &column[cursor..cursor + row_sizes[i]];
            let next_start = cursor + row_sizes[i];
            let hi = ground[*group.last().unwrap()].y;
            let lo = ground[column[next_start]].y;
            y_edges.push((hi + lo) * half);
            cursor = next_start;
        }
        y_edges.push(rect.max.y);

        for ri in 0..cfg.rows {
            let core = Rect2 {
                min: Vector2::new(x_edges[ci], y_edges[ri]),
                max: Vector2::new(x_edges[ci + 1], y_edges[ri + 1]),
            };
            blocks.push(SceneBlock {
                id: (ci * cfg.rows + ri) as u32,
                expanded: core.dilate(T::of(cfg.expand_ratio)),
                core,
                view_ids: Vec::new(),
                point_ids: Vec::new(),
            });
        }
    }

    // Candidate points, view selection and track augmentation per block.
    let share = n.div_ceil(cfg.columns * cfg.rows);
    let keep = cfg.views_per_block.unwrap_or(2 * share).max(1);
    for block in &mut blocks {
        let mut candidates: Vec<u64> = Vec::new();
        let mut positions: Vec<Vector3<T>> = Vec::new();
        for p in &scene.points {
            if block.expanded.contains_closed(&Vector2::new(p.position.x, p.position.y)) {
                candidates.push(p.id);
                positions.push(p.position);
            }
        }

        let mut scored: Vec<(usize, u32)> = scene
            .views
            .iter()
            .map(|v| (score_viewpoint(v, &positions, cfg.center_fraction), v.id))
            .filter(|(s, _)| *s > 0)
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        scored.truncate(keep);
        block.view_ids = scored.iter().map(|(_, id)| *id).collect();
        block.view_ids.sort_unstable();
        if block.view_ids.is_empty() {
            // A block with no observed points still needs cameras: fall back
            // to the ones physically closest to its center.
            let center = (block.core.min + block.core.max) * half;
            let mut by_dist: Vec<(T, u32)> = scene
                .views
                .iter()
                .enumerate()
                .map(|(i, v)| ((ground[i] - center).norm_squared(), v.id))
                .collect();
            by_dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| a.1.cmp(&b.1)));
            block.view_ids = by_dist.iter().take(keep).map(|(_, id)| *id).collect();
            block.view_ids.sort_unstable();
        }

        // Points: everything inside the padded bounds plus the full tracks
        // of the selected views, so training covers what those views see.
        let selected: HashSet<u32> = block.view_ids.iter().copied().collect();
        let mut ids: BTreeSet<u64> = candidates.into_iter().collect();
        for p in &scene.points {
            if p.track.iter().any(|t| selected.contains(t)) {
                ids.insert(p.id);
            }
        }
        block.point_ids = ids.into_iter().collect();
    }
    Ok(blocks)
}

/// Splits a merged-model candidate question: does this block's core own the
/// given ground position? Lower and left edges are inclusive; upper edges are
/// only inclusive where the core touches the scene rectangle's maximum, so
/// every position belongs to exactly one core.
pub fn core_owns_position<T: Scalar>(
    block: &SceneBlock<T>,
    scene_rect: &Rect2<T>,
    position: &Vector2<T>,
) -> bool {
    let open = block.core.contains_half_open(position);
    if open {
        return true;
    }
    // Recover points exactly on a closed scene-edge maximum.
    let on_x_max = block.core.max.x == scene_rect.max.x && position.x == block.core.max.x;
    let on_y_max = block.core.max.y == scene_rect.max.y && position.y == block.core.max.y;
    let x_in = (position.x >= block.core.min.x && position.x < block.core.max.x) || on_x_max;
    let y_in = (position.y >= block.core.min.y && position.y < block.core.max.y) || on_y_max;
    x_in && y_in
}

pub fn write_blocks<T: Scalar>(blocks: &[SceneBlock<T>], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let go = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        writeln!(w, "# scene block manifest")?;
        writeln!(w, "blocks {}", blocks.len())?;
        for b in blocks {
            writeln!(w, "block {}", b.id)?;
            let rect = |r: &Rect2<T>| {
                format!(
                    "{:.17} {:.17} {:.17} {:.17}",
                    r.min.x.to_double(),
                    r.min.y.to_double(),
                    r.max.x.to_double(),
                    r.max.y.to_double()
                )
            };
            writeln!(w, "core {}", rect(&b.core))?;
            writeln!(w, "expanded {}", rect(&b.expanded))?;
            write!(w, "views {}", b.view_ids.len())?;
            for id in &b.view_ids {
                write!(w, " {id}")?;
            }
            writeln!(w)?;
            write!(w, "points {}", b.point_ids.len())?;
            for id in &b.point_ids {
                write!(w, " {id}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    };
    go(&mut w).map_err(|e| Error::io(path, e))
}

pub fn read_blocks<T: Scalar>(path: &Path) -> Result<Vec<SceneBlock<T>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))?
        .into_iter()
        .filter(|l| !l.trim().is_empty() && !l.trim().starts_with('#'));

    let header = lines.next().ok_or_else(|| Error::parse(path, "empty manifest"))?;
    let count: usize = header
        .strip_prefix("blocks ")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::parse(path, "missing block count"))?;

    let mut need = |prefix: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| Error::parse(path, "manifest ended early"))?;
        line.strip_prefix(prefix)
            .map(|s| s.trim().to_string())
            .ok_or_else(|| Error::parse(path, format!("expected `{prefix}` line, got `{line}`")))
    };

    let parse_rect = |s: &str| -> Result<Rect2<T>> {
        let vals: Vec<f64> = s
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(path, "bad rectangle"))?;
        if vals.len() != 4 {
            return Err(Error::parse(path, "rectangle needs four numbers"));
        }
        Ok(Rect2 {
            min: Vector2::new(T::of(vals[0]), T::of(vals[1])),
            max: Vector2::new(T::of(vals[2]), T::of(vals[3])),
        })
    };
    let parse_ids = |s: &str, what: &str| -> Result<Vec<u64>> {
        let mut tok = s.split_whitespace();
        let k: usize = tok
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::parse(path, format!("missing {what} count")))?;
        let ids: Vec<u64> = tok
            .map(|t| t.parse::<u64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(path, format!("bad {what} id")))?;
        if ids.len() != k {
            return Err(Error::parse(path, format!("{what} count mismatch")));
        }
        Ok(ids)
    };

    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let id: u32 = need("block ")?
            .parse()
            .map_err(|_| Error::parse(path, "bad block id"))?;
        let core = parse_rect(&need("core ")?)?;
        let expanded = parse_rect(&need("expanded ")?)?;
        let views = parse_ids(&need("views ")?, "view")?;
        let points = parse_ids(&need("points ")?, "point")?;
        blocks.push(SceneBlock {
            id,
            core,
            expanded,
            view_ids: views.into_iter().map(|v| v as u32).collect(),
            point_ids: points,
        });
    }
    Ok(blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SparsePoint;
    use approx::assert_abs_diff_eq;
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nadir_view(id: u32, center: Vector3<f64>, size: u32, focal: f64) -> CameraView<f64> {
        let rotation = nalgebra::Rotation3::from_matrix_unchecked(Matrix3::new(
            1.0, 0.0, 0.0, //
            0.0, -1.0, 0.0, //
            0.0, 0.0, -1.0,
        ));
        let translation = -(rotation * center);
        CameraView {
            id,
            width: size,
            height: size,
            fx: focal,
            fy: focal,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            rotation,
            translation,
            image_name: format!("img_{id}.png"),
        }
    }

    fn grid_scene(cols: usize, rows: usize, spacing: f64, altitude: f64) -> SfmScene<f64> {
        let mut scene = SfmScene::default();
        let mut id = 0;
        for r in 0..rows {
            for c in 0..cols {
                scene.views.push(nadir_view(
                    id,
                    Vector3::new(c as f64 * spacing, r as f64 * spacing, altitude),
                    64,
                    // Footprint about 1.6x the camera spacing.
                    64.0 * altitude / (1.6 * spacing),
                ));
                id += 1;
            }
        }
        // Ground points on a dense grid across the whole footprint.
        let ext_x = (cols - 1) as f64 * spacing;
        let ext_y = (rows - 1) as f64 * spacing;
        let mut pid = 0;
        for i in 0..40 {
            for j in 0..40 {
                let x = -spacing + (ext_x + 2.0 * spacing) * i as f64 / 39.0;
                let y = -spacing + (ext_y + 2.0 * spacing) * j as f64 / 39.0;
                let position = Vector3::new(x, y, 0.0);
                let track: Vec<u32> = scene
                    .views
                    .iter()
                    .filter(|v| v.project(&position).is_some_and(|p| v.contains(p.u, p.v)))
                    .map(|v| v.id)
                    .collect();
                if track.is_empty() {
                    continue;
                }
                scene.points.push(SparsePoint {
                    id: pid,
                    position,
                    color: Vector3::new(0.5, 0.5, 0.5),
                    track,
                });
                pid += 1;
            }
        }
        scene
    }

    #[test]
    fn worked_two_column_split() {
        // Cameras at x = 0, 1, 2 and 10, 11, 12: the split between columns
        // sits midway between 2 and 10.
        let mut scene = SfmScene::default();
        for (i, x) in [0.0, 1.0, 2.0, 10.0, 11.0, 12.0].iter().enumerate() {
            scene.views.push(nadir_view(i as u32, Vector3::new(*x, (i % 2) as f64, 30.0), 32, 32.0));
        }
        let cfg = PartitionConfig { columns: 2, rows: 1, ..Default::default() };
        let blocks = partition_scene(&scene, &cfg).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_abs_diff_eq!(blocks[0].core.min.x, 0.0);
        assert_abs_diff_eq!(blocks[0].core.max.x, 6.0);
        assert_abs_diff_eq!(blocks[1].core.min.x, 6.0);
        assert_abs_diff_eq!(blocks[1].core.max.x, 12.0);
        // Padding is a fifth of each side length on both ends.
        assert_abs_diff_eq!(blocks[0].expanded.min.x, -1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(blocks[0].expanded.max.x, 7.2, epsilon = 1e-12);
    }

    #[test]
    fn group_sizes_differ_by_at_most_one() {
        assert_eq!(group_sizes(7, 2), vec![4, 3]);
        assert_eq!(group_sizes(9, 3), vec![3, 3, 3]);
        assert_eq!(group_sizes(10, 4), vec![3, 3, 2, 2]);
        assert_eq!(group_sizes(3, 3), vec![1, 1, 1]);
    }

    #[test]
    fn random_layouts_tile_the_scene_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for round in 0..50 {
            let cols = rng.gen_range(1..=4);
            let rows = rng.gen_range(1..=3);
            let n = rng.gen_range(cols * rows..cols * rows + 30);
            let mut scene = SfmScene::default();
            for i in 0..n {
                scene.views.push(nadir_view(
                    i as u32,
                    Vector3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), 40.0),
                    32,
                    32.0,
                ));
            }
            let cfg = PartitionConfig { columns: cols, rows, ..Default::default() };
            let blocks = partition_scene(&scene, &cfg).unwrap();
            assert_eq!(blocks.len(), cols * rows, "round {round}");
            let rect = scene_ground_rect(&scene).unwrap();

            // Area conservation.
            let area: f64 = blocks.iter().map(|b| b.core.width() * b.core.height()).sum();
            assert_abs_diff_eq!(area, rect.width() * rect.height(), epsilon = 1e-6);

            // Random interior probes land in exactly one core.
            for _ in 0..100 {
                let p = Vector2::new(
                    rng.gen_range(rect.min.x..rect.max.x),
                    rng.gen_range(rect.min.y..rect.max.y),
                );
                let owners =
                    blocks.iter().filter(|b| core_owns_position(b, &rect, &p)).count();
                assert_eq!(owners, 1, "round {round} point {p:?}");
            }
        }
    }

    #[test]
    fn scene_max_corner_belongs_to_exactly_one_core() {
        let scene = grid_scene(4, 4, 10.0, 30.0);
        let cfg = PartitionConfig { columns: 2, rows: 2, ..Default::default() };
        let blocks = partition_scene(&scene, &cfg).unwrap();
        let rect = scene_ground_rect(&scene).unwrap();
        let corner = rect.max;
        let owners = blocks.iter().filter(|b| core_owns_position(b, &rect, &corner)).count();
        assert_eq!(owners, 1);
    }

    #[test]
    fn view_score_is_monotone_in_the_point_set() {
        let view = nadir_view(0, Vector3::new(0.0, 0.0, 30.0), 64, 64.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let all: Vec<Vector3<f64>> = (0..200)
            .map(|_| {
                Vector3::new(rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0), 0.0)
            })
            .collect();
        let subset: Vec<Vector3<f64>> = all.iter().take(80).copied().collect();
        let s_small = score_viewpoint(&view, &subset, 0.7);
        let s_big = score_viewpoint(&view, &all, 0.7);
        assert!(s_small <= s_big);
        // Points straight below the camera project dead center.
        let s = score_viewpoint(&view, &[Vector3::new(0.0, 0.0, 0.0)], 0.7);
        assert_eq!(s, 1);
        // A point projecting outside the center box does not count.
        let s = score_viewpoint(&view, &[Vector3::new(14.0, 0.0, 0.0)], 0.7);
        assert_eq!(s, 0);
    }

    #[test]
    fn ties_prefer_the_lower_view_id() {
        // Two cameras in symmetric positions see the single point equally
        // well; only one slot is available.
        let mut scene = SfmScene::default();
        scene.views.push(nadir_view(3, Vector3::new(1.0, 0.0, 30.0), 32, 32.0));
        scene.views.push(nadir_view(1, Vector3::new(-1.0, 0.0, 30.0), 32, 32.0));
        scene.points.push(SparsePoint {
            id: 0,
            position: Vector3::new(0.0, 0.0, 0.0),
            color: Vector3::zeros(),
            track: vec![1, 3],
        });
        let cfg = PartitionConfig {
            columns: 1,
            rows: 1,
            views_per_block: Some(1),
            ..Default::default()
        };
        let blocks = partition_scene(&scene, &cfg).unwrap();
        assert_eq!(blocks[0].view_ids, vec![1]);
    }

    #[test]
    fn every_view_lands_in_some_block() {
        // Realistic overlapping nadir grids: with the default budget of twice
        // the per-block share, the cameras over each cell dominate its
        // scores, so every camera is picked somewhere.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let cols = rng.gen_range(3..6);
            let rows = rng.gen_range(3..6);
            let scene = grid_scene(cols, rows, 10.0, 30.0);
            let cfg = PartitionConfig { columns: 2, rows: 2, ..Default::default() };
            let blocks = partition_scene(&scene, &cfg).unwrap();
            let mut covered: HashSet<u32> = HashSet::new();
            for b in &blocks {
                covered.extend(b.view_ids.iter().copied());
            }
            for v in &scene.views {
                assert!(covered.contains(&v.id), "view {} in no block", v.id);
            }
        }
    }

    #[test]
    fn selected_view_tracks_augment_the_point_set() {
        let scene = grid_scene(4, 4, 10.0, 30.0);
        let cfg = PartitionConfig { columns: 2, rows: 2, ..Default::default() };
        let blocks = partition_scene(&scene, &cfg).unwrap();
        for block in &blocks {
            let ids: HashSet<u64> = block.point_ids.iter().copied().collect();
            let selected: HashSet<u32> = block.view_ids.iter().copied().collect();
            for p in &scene.points {
                if p.track.iter().any(|t| selected.contains(t)) {
                    assert!(ids.contains(&p.id), "tracked point {} missing", p.id);
                }
            }
        }
    }

    #[test]
    fn manifest_roundtrip_preserves_blocks() {
        let scene = grid_scene(3, 3, 10.0, 30.0);
        let cfg = PartitionConfig { columns: 2, rows: 1, ..Default::default() };
        let blocks = partition_scene(&scene, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blocks.txt");
        write_blocks(&blocks, &path).unwrap();
        let back = read_blocks::<f64>(&path).unwrap();
        assert_eq!(blocks, back);
    }

    #[test]
    fn too_few_cameras_for_the_grid_is_a_config_error() {
        let scene = grid_scene(2, 1, 10.0, 30.0);
        let cfg = PartitionConfig { columns: 3, rows: 1, ..Default::default() };
        assert!(partition_scene(&scene, &cfg).is_err());
    }
}
