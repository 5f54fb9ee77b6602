mod common;

use rand::Rng;

use cameta::gridworld::{Cell, GridMap};
use cameta::planners::{astar, dijkstra_field, path_cost, suggest_routes, EdgePenalties, PlanError};

/// Cheapest simple path by exhaustive depth-first enumeration.
fn brute_min_cost(map: &GridMap, start: Cell, goal: Cell, pen: &EdgePenalties) -> Option<f64> {
    fn go(map: &GridMap, c: Cell, goal: Cell, pen: &EdgePenalties, seen: &mut Vec<Cell>, acc: f64, best: &mut Option<f64>) {
        if c == goal {
            if best.map_or(true, |b| acc < b) {
                *best = Some(acc);
            }
            return;
        }
        for nb in map.adjacent_free(c) {
            if !seen.contains(&nb) {
                seen.push(nb);
                go(map, nb, goal, pen, seen, acc + pen.factor(c, nb), best);
                seen.pop();
            }
        }
    }
    let mut best = None;
    go(map, start, goal, pen, &mut vec![start], 0.0, &mut best);
    best
}

#[test]
fn astar_matches_exhaustive_search_on_small_maps() {
    let mut rng = common::rng(10);
    let mut solved = 0;
    for _ in 0..300 {
        let map = common::random_map(&mut rng, 4, 4, 0.25);
        let free = map.free_cells();
        if free.len() < 2 {
            continue;
        }
        let start = free[rng.gen_range(0..free.len())];
        let goal = free[rng.gen_range(0..free.len())];
        let mut pen = EdgePenalties::new();
        for &c in &free {
            for nb in map.adjacent_free(c) {
                if rng.gen_bool(0.5) {
                    pen.set(c, nb, rng.gen_range(1.0..3.0));
                }
            }
        }
        match (astar(&map, start, goal, &pen), brute_min_cost(&map, start, goal, &pen)) {
            (Ok(p), Some(best)) => {
                assert!(p.is_valid_on(&map));
                assert_eq!((p.start(), p.goal()), (start, goal));
                assert!((path_cost(&p, &pen) - best).abs() < 1e-9);
                solved += 1;
            }
            (Err(PlanError::NoPath { .. }), None) => {}
            (got, want) => panic!("astar {got:?}, exhaustive {want:?}"),
        }
    }
    assert!(solved > 100);
}

#[test]
fn unpenalized_astar_length_matches_distance_field() {
    let mut rng = common::rng(11);
    for _ in 0..100 {
        let map = common::random_map(&mut rng, 12, 9, 0.2);
        let free = map.free_cells();
        if free.len() < 2 {
            continue;
        }
        let start = free[rng.gen_range(0..free.len())];
        let goal = free[rng.gen_range(0..free.len())];
        let field = dijkstra_field(&map, goal).unwrap();
        match astar(&map, start, goal, &EdgePenalties::new()) {
            Ok(p) => assert_eq!(p.len() as f64, field.get(start) + 1.0),
            Err(_) => assert!(!field.is_reachable(start)),
        }
    }
}

#[test]
fn suggested_routes_are_valid_distinct_and_reproducible() {
    let mut rng = common::rng(12);
    for _ in 0..50 {
        let map = common::random_map(&mut rng, 10, 10, 0.15);
        let free = map.free_cells();
        let start = free[rng.gen_range(0..free.len())];
        let goal = free[rng.gen_range(0..free.len())];
        let Ok(routes) = suggest_routes(&map, start, goal, 4, 1.2) else {
            continue;
        };
        assert!(!routes.is_empty() && routes.len() <= 4);
        for (i, r) in routes.iter().enumerate() {
            assert!(r.is_valid_on(&map) && r.start() == start && r.goal() == goal);
            assert!(routes[..i].iter().all(|q| q.cells != r.cells));
        }
        assert!(routes.windows(2).all(|w| w[0].len() <= w[1].len()));
        assert_eq!(suggest_routes(&map, start, goal, 4, 1.2).unwrap(), routes);
    }
}
