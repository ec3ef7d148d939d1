use helmscat::grid::{build_tree, cone_of, uniform_tree, BoxRecord, Regime, Tree, TreeConfig};
use helmscat::{Complex64, Point2D};

fn gaussian(x: Point2D) -> f64 {
    1.5 * (-160.0 * (x.x1 * x.x1 + x.x2 * x.x2)).exp()
}

fn plane(x: Point2D) -> Complex64 {
    Complex64::new(0.0, 40.0 * x.x1).exp()
}

fn adaptive(eps_grid: f64, p: usize) -> Tree {
    let cfg = TreeConfig { p, kappa: 40.0, eps_grid, ..Default::default() };
    build_tree(&cfg, &gaussian, &plane).unwrap()
}

#[test]
fn leaves_tile_the_domain_and_own_their_points() {
    let t = adaptive(1e-5, 6);
    let area: f64 = t.leaves.iter().map(|&l| t.boxes[l].width().powi(2)).sum();
    assert!((area - 1.0).abs() < 1e-12);
    assert_eq!(t.n_points(), t.leaves.len() * 36);
    for (li, &l) in t.leaves.iter().enumerate() {
        let b = &t.boxes[l];
        assert_eq!(b.range.len(), 36);
        for i in b.range.clone() {
            assert!(b.contains(t.points[i]));
            assert_eq!(t.point_leaf[i] as usize, li);
        }
    }
}

#[test]
fn adjacent_leaves_differ_by_at_most_one_level() {
    assert!(adaptive(1e-8, 6).max_adjacent_level_jump() <= 1);
}

#[test]
fn refinement_concentrates_at_the_peak() {
    let t = adaptive(1e-8, 6);
    let finest = t.leaves.iter().map(|&l| t.boxes[l].level).max().unwrap();
    let centre = t.locate(Point2D::new(0.01, 0.01)).unwrap();
    let corner = t.locate(Point2D::new(0.49, 0.49)).unwrap();
    assert_eq!(t.boxes[centre].level, finest);
    assert!(t.boxes[corner].level < finest);
}

#[test]
fn tighter_tolerance_gives_more_points() {
    assert!(adaptive(1e-9, 6).n_points() > adaptive(1e-6, 6).n_points());
}

#[test]
fn regime_follows_threshold() {
    let t = adaptive(1e-6, 6);
    for b in &t.boxes {
        let high = (t.cfg.kappa * b.width()).powi(2) > t.cfg.hf_threshold_t;
        assert_eq!(b.regime == Regime::High, high, "box {}", b.id);
    }
}

#[test]
fn cone_half_angle_bounded_by_inverse_width() {
    let cfg = TreeConfig { p: 4, kappa: 200.0, eps_grid: 1e-3, ..Default::default() };
    let t = build_tree(&cfg, &gaussian, &plane).unwrap();
    let mut seen = 0;
    for (level, ids) in t.levels.iter().enumerate() {
        let w = t.boxes[ids[0]].width();
        if let Some(a) = t.cone_half_angle(level as u32) {
            assert!(a <= 1.0 / (cfg.kappa * w) + 1e-15, "level {level}");
            seen += 1;
        }
    }
    assert!(seen >= 2);
}

#[test]
fn interaction_lists_are_mutual() {
    let cfg = TreeConfig { p: 4, kappa: 200.0, eps_grid: 1e-3, ..Default::default() };
    let t = build_tree(&cfg, &gaussian, &plane).unwrap();
    for b in &t.boxes {
        for &o in &b.il_low {
            assert!(t.boxes[o].il_low.contains(&b.id));
        }
        for (&cone, list) in &b.il_high {
            for &(o, back) in list {
                let d = t.boxes[o].center;
                assert_eq!(cone_of(d.x1 - b.center.x1, d.x2 - b.center.x2, t.cone_counts[b.level as usize]), cone);
                assert!(t.boxes[o].il_high[&back].contains(&(b.id, cone)));
            }
        }
        for &o in &b.neighbors {
            assert!(t.boxes[o].neighbors.contains(&b.id));
        }
    }
}

#[test]
fn near_field_is_symmetric_and_covers_adjacent_leaves() {
    let t = adaptive(1e-6, 6);
    let index_of = |id: usize| t.boxes[id].leaf_index.unwrap();
    for (a, near) in t.near.iter().enumerate() {
        let la = t.leaves[a];
        for &b in near {
            assert!(t.near[index_of(b)].contains(&la));
        }
        for &lb in &t.leaves {
            if t.adjacent(la, lb) {
                assert!(near.contains(&lb), "adjacent leaves {la} {lb} not near");
            }
        }
    }
}

#[test]
fn uniform_tree_rejects_high_frequency_leaves() {
    let cfg = TreeConfig { p: 4, kappa: 400.0, ..Default::default() };
    assert!(uniform_tree(cfg, 2).is_err());
    let cfg = TreeConfig { p: 4, kappa: 10.0, ..Default::default() };
    let t = uniform_tree(cfg, 3).unwrap();
    assert_eq!(t.leaves.len(), 64);
    assert_eq!(t.n_points(), 1024);
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        TreeConfig { p: 1, ..Default::default() },
        TreeConfig { kappa: 0.0, ..Default::default() },
        TreeConfig { eps_grid: -1.0, ..Default::default() },
        TreeConfig { domain_half_width: 0.0, ..Default::default() },
    ] {
        assert!(build_tree(&cfg, &gaussian, &plane).is_err());
    }
}

#[test]
fn jsonl_dump_round_trips() {
    let t = adaptive(1e-4, 4);
    let dir = std::env::temp_dir().join(format!("helmscat-grid-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("grid.jsonl");
    t.write_jsonl(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let recs: Vec<BoxRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs, t.records());
    assert_eq!(recs[0].parent_id, None);
    for r in &recs[1..] {
        let p = &recs[r.parent_id.unwrap()];
        assert_eq!(p.level + 1, r.level);
        assert!(!p.leaf);
    }
    assert_eq!(recs.iter().filter(|r| r.leaf).count(), t.leaves.len());
    std::fs::remove_dir_all(&dir).unwrap();
}
