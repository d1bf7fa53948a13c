//! The simplex solver against exhaustive vertex enumeration.

mod support {
    pub mod lp_oracle;
}

use gridrelief_core::lp::{solve_lp, LpProblem, LpStatus, LP_TOL};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::lp_oracle::{enumerate, random_lp, Oracle};

#[test]
fn random_lps_match_vertex_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut counts = [0usize; 3];
    for case in 0..300 {
        let p = random_lp(&mut rng, 5, 8);
        let sol = solve_lp(&p).unwrap();
        let oracle = enumerate(&p);
        assert_eq!(sol.status, oracle.status(), "case {case}: {p:?}");
        match oracle {
            Oracle::Optimal(obj) => {
                counts[0] += 1;
                assert!((sol.objective - obj).abs() < 1e-6, "case {case}: {} vs {obj}", sol.objective);
                assert!(p.max_violation(&sol.x) < LP_TOL);
            }
            Oracle::Infeasible => counts[1] += 1,
            Oracle::Unbounded => counts[2] += 1,
        }
    }
    // the generator must exercise every outcome
    assert!(counts.iter().all(|&c| c > 10), "{counts:?}");
}

#[test]
fn repeated_solves_are_bitwise_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let p = random_lp(&mut rng, 6, 10);
        let a = solve_lp(&p).unwrap();
        let b = solve_lp(&p).unwrap();
        assert_eq!(a.status, b.status);
        let bits = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.x), bits(&b.x));
        if a.status == LpStatus::Optimal {
            assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        }
    }
}

/// Reads the plain-text dump format: `v lo hi cost` per variable and
/// `r lo hi j c j c ...` per row.
fn load_dump(text: &str) -> LpProblem {
    let mut p = LpProblem::default();
    let num = |s: &str| s.parse::<f64>().expect("number");
    for line in text.lines() {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t[0] {
            "v" => {
                p.add_var("x", num(t[1]), num(t[2]), num(t[3]));
            }
            "r" => {
                let coefs = t[3..].chunks(2).map(|c| (c[0].parse().expect("index"), num(c[1]))).collect();
                p.add_row("r", coefs, num(t[1]), num(t[2]));
            }
            other => panic!("unknown record {other}"),
        }
    }
    p
}

/// An active-power program from the 118-bus overload sweep on which
/// smallest-index pricing stalled. The reference optimum is from HiGHS.
#[test]
fn degenerate_active_program_reaches_optimum() {
    let p = load_dump(include_str!("data/degenerate_active_lp.txt"));
    assert_eq!((p.vars.len(), p.rows.len()), (116, 39));
    let sol = solve_lp(&p).unwrap();
    assert_eq!(sol.status, LpStatus::Optimal);
    assert!((sol.objective - 0.008265079721185318).abs() < 1e-12, "{}", sol.objective);
    assert!(p.max_violation(&sol.x) < LP_TOL);
}
