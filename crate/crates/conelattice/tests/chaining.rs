use conelattice::chaining::{
    audit_path_family, block_edge, block_route, build_favored_graph, build_path_family, chaining_setup, favored_cone,
    first_jump, verify_path_family, weave_paths, Block, FamilyOptions, Town,
};
use conelattice::configuration::{random_configuration, reduce_configuration, reference_cones, Backend, Configuration, Region};
use conelattice::geometry::{boundary_distance, cone_contains, Direction, DoubleCone};
use conelattice::lattice_graph::LatticeBall;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;
use std::f64::consts::PI;

fn reduced(seed: u64) -> Configuration {
    let fam = reference_cones(2, PI / 6.0).unwrap();
    reduce_configuration(&random_configuration(2, PI / 6.0, seed).unwrap(), &fam).unwrap()
}

#[test]
fn majority_of_nine() {
    let fam = reference_cones(2, PI / 6.0).unwrap();
    let wide = |i: usize| DoubleCone::new(fam.cones()[i].axis().clone(), PI / 6.0).unwrap();
    // Rows y = -1 and y = 0 minus (1, 0) get cone 0 (5 points); the rest cone 9.
    let regions = vec![
        Region { lo: vec![1, 0], hi: vec![1, 0], cone: 1 },
        Region { lo: vec![-1, -1], hi: vec![1, 0], cone: 0 },
    ];
    let base = Configuration::new(
        2,
        PI / 6.0,
        0,
        Backend::Table {
            cones: vec![wide(0), wide(9)],
            default: 1,
            regions,
        },
    )
    .unwrap();
    let red = reduce_configuration(&base, &fam).unwrap();
    let block = Block::new(vec![0, 0], 3);
    assert_eq!(block.len(), 9);
    let f = favored_cone(&block, &red).unwrap();
    let mut recount = vec![0usize; fam.len()];
    for p in block.points() {
        recount[red.reduced_index(&p).unwrap().1] += 1;
    }
    assert_eq!(f.counts, recount);
    assert_eq!(f.count, 5);
    assert_eq!(f.index, red.reduced_index(&[-1, -1]).unwrap().1);

    let constant = Configuration::constant(DoubleCone::new(Direction::basis(2, 0), PI / 2.0).unwrap());
    let fam90 = reference_cones(2, PI / 2.0).unwrap();
    let red90 = reduce_configuration(&constant, &fam90).unwrap();
    let f = favored_cone(&Block::new(vec![4, 7], 5), &red90).unwrap();
    assert_eq!(f.cone, red90.cone_at(&[0, 0]).unwrap());
    assert_eq!(f.count, 25);
}

#[test]
fn aligned_blocks_are_joined() {
    let setup = chaining_setup(&reduced(0), 1.0, None).unwrap();
    for cone in setup.family.cones() {
        let v = cone.axis().coords();
        for side in [1i64, 3, 5] {
            for factor in [1.0, 1.5, 3.0] {
                let t = factor * setup.eta * side as f64;
                let c: Vec<i64> = v.iter().map(|x| (t * x).round() as i64).collect();
                let (a, b) = (Block::new(vec![0, 0], side), Block::new(c, side));
                assert!(block_edge(cone, &a, &b), "side {side} factor {factor}");
                assert!(block_edge(cone, &b, &a));
            }
            let a = Block::new(vec![3, 3], side);
            assert!(!block_edge(cone, &a, &a));
        }
    }
}

#[test]
fn center_test_implies_edge() {
    let fam = reference_cones(2, PI / 6.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut fired = 0;
    for _ in 0..20_000 {
        let cone = &fam.cones()[rng.random_range(0..fam.len())];
        let side = [1i64, 3, 5][rng.random_range(0..3)];
        let c = vec![rng.random_range(-200..=200i64), rng.random_range(-200..=200i64)];
        let cf: Vec<f64> = c.iter().map(|x| *x as f64).collect();
        let w = 2 * (side / 2);
        let a = Block::new(vec![0, 0], side);
        let b = Block::new(c.clone(), side);
        let brute = a.points().iter().all(|p| {
            b.points().iter().all(|q| {
                let h: Vec<f64> = q.iter().zip(p).map(|(x, y)| (x - y) as f64).collect();
                cone.contains_offset(&h)
            })
        });
        assert_eq!(block_edge(cone, &a, &b), brute, "{c:?} side {side}");
        if cone.contains_offset(&cf) && boundary_distance(cone, &cf) > w as f64 * 2f64.sqrt() {
            fired += 1;
            assert!(brute);
        }
    }
    assert!(fired > 100);
}

#[test]
fn routes_cover_required_blocks() {
    let red = reduced(2);
    let setup = chaining_setup(&red, 1.0, None).unwrap();
    let delta = setup.delta;
    let town = Town::new(delta, 1, 2, setup.eta);
    let z = vec![0, 0];
    let r = 3.0;
    let fav = build_favored_graph(&town, &setup.reduced, &z, delta as f64 * 12.0).unwrap();
    let route = block_route(&z, 1, delta, r, &fav).unwrap();
    for w in route.windows(2) {
        assert!(fav.has_edge(w[0], w[1]) || fav.has_edge(w[1], w[0]));
    }
    let visited: HashSet<usize> = route.iter().copied().collect();
    for (i, b) in fav.blocks.iter().enumerate() {
        if b.max_dist(&z) <= delta as f64 * r {
            assert!(visited.contains(&i), "block {:?} missed", b.center);
        }
    }
    // Only the block at z itself is required.
    let single = block_route(&z, 1, delta, 0.5, &fav).unwrap();
    assert_eq!(single.len(), 1);
}

#[test]
fn weaving_scheme() {
    let p = |k: i64, i: i64| vec![k, i];
    let columns: Vec<Vec<Vec<i64>>> = (0..4).map(|k| vec![p(k, 0), p(k, 1)]).collect();
    let paths = weave_paths(&columns, 2).unwrap();
    let expected = [[0, 0, 0, 0], [0, 1, 0, 1], [1, 1, 1, 1], [1, 0, 1, 0]];
    assert_eq!(paths.len(), 4);
    for (path, idx) in paths.iter().zip(expected) {
        let want: Vec<Vec<i64>> = idx.iter().enumerate().map(|(k, &i)| p(k as i64, i)).collect();
        assert_eq!(path, &want);
    }
    let one = weave_paths(&columns[..3], 1).unwrap();
    assert_eq!(one, vec![vec![p(0, 0), p(1, 0), p(2, 0)]]);

    let a = 3;
    let wide: Vec<Vec<Vec<i64>>> = (0..5).map(|k| (0..a as i64).map(|i| p(k, i)).collect()).collect();
    let paths = weave_paths(&wide, a).unwrap();
    for k in 0..5 {
        for i in 0..a as i64 {
            let n = paths.iter().filter(|path| path[k as usize] == p(k, i)).count();
            assert!(n <= 2 * a);
        }
    }
}

#[test]
fn first_jump_postconditions() {
    let constant = Configuration::constant(DoubleCone::new(Direction::basis(2, 0), PI / 2.0).unwrap());
    let fam = reference_cones(2, PI / 2.0).unwrap();
    let red = reduce_configuration(&constant, &fam).unwrap();
    let j = first_jump(&red, &[0, 0], 1, 38, 1.0, 32.0).unwrap();
    let cone = red.cone_at(&[0, 0]).unwrap();
    assert!(j.block.center != vec![0, 0]);
    for q in j.block.points() {
        let qf: Vec<f64> = q.iter().map(|c| *c as f64).collect();
        assert!(cone_contains(&cone, &[0.0, 0.0], &qf).unwrap());
    }
    let config = reduced(7);
    for x in LatticeBall::around(&[10, -4], 5.0).unwrap().points() {
        let j = first_jump(&config, &x, 2, 38, 1.0, 32.0).unwrap();
        let cone = config.cone_at(&x).unwrap();
        assert!(j.block.points().iter().all(|q| {
            let h: Vec<i64> = q.iter().zip(&x).map(|(a, b)| a - b).collect();
            cone.contains_lattice_offset(&h)
        }));
        assert!(j.block.min_dist(&x) >= 38.0);
        assert!(j.reach <= 38f64.powi(2) * 32.0);
    }
}

#[test]
fn two_point_family_shares_paths() {
    let config = random_configuration(2, PI / 6.0, 1).unwrap();
    let fam = build_path_family(&config, &[0, 0], 1.0, None, 1.5, &FamilyOptions::default()).unwrap();
    assert_eq!(fam.stats.pairs, 2);
    let p = fam.path(&[-1, 0], &[1, 0]).unwrap();
    let mut q = fam.path(&[1, 0], &[-1, 0]).unwrap();
    q.reverse();
    assert_eq!(p, q);
    assert!(fam.path(&[0, 0], &[1, 0]).is_none());
}

#[test]
fn family_edges_are_graph_edges() {
    let config = random_configuration(2, PI / 6.0, 4).unwrap();
    let fam = build_path_family(&config, &[0, 0], 6.0, None, 1.0, &FamilyOptions::default()).unwrap();
    // Edge of G(Γ) straight from the definition: y ∈ Γ(x) or x ∈ Γ(y).
    let joined = |u: &[i64], v: &[i64]| {
        let h: Vec<f64> = v.iter().zip(u).map(|(a, b)| (a - b) as f64).collect();
        u != v && (config.cone_at(u).unwrap().contains_offset(&h) || config.cone_at(v).unwrap().contains_offset(&h))
    };
    let mut n = 0;
    fam.for_each_path(|x, y, path| {
        assert_eq!(path.first(), Some(x));
        assert_eq!(path.last(), Some(y));
        for w in path.windows(2) {
            assert!(joined(&w[0], &w[1]), "{:?} {:?}", w[0], w[1]);
        }
        n += 1;
    });
    assert_eq!(n as u64, fam.stats.pairs);
}

#[test]
fn constant_family_verifies() {
    let constant = Configuration::constant(DoubleCone::new(Direction::new(vec![2.0, 1.0]).unwrap(), PI / 3.0).unwrap());
    let fam = build_path_family(&constant, &[0, 0], 32.0, None, 1.0, &FamilyOptions::default()).unwrap();
    let v = verify_path_family(&fam);
    assert!(v.endpoints_ok && v.edges_ok && v.usage_ok && v.lengths_ok, "{:?}", v.violations);
    assert!(fam.stats.lambda <= 2.0 * fam.stats.r_used * fam.delta as f64);
}

/// Statistics of one family, recomputed by the independent audit and then frozen.
#[test]
fn frozen_family_statistics() {
    let config = random_configuration(2, PI / 6.0, 0).unwrap();
    let fam = build_path_family(&config, &[0, 0], 8.0, None, 1.0, &FamilyOptions::default()).unwrap();
    let audit = audit_path_family(&fam).unwrap();
    assert_eq!((audit.pairs, audit.b, audit.m), (fam.stats.pairs, fam.stats.b, fam.stats.m));
    assert!((audit.lambda - fam.stats.lambda).abs() < 1e-12);
    assert_eq!(fam.delta, 38);
    assert_eq!((fam.stats.pairs, fam.stats.b, fam.stats.m), FROZEN);
}

const FROZEN: (u64, usize, u64) = (18946, 38, 5331);
