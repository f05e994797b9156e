//! Explicit Runge-Kutta Butcher tableaus: registry, validation, order
//! classification.
//!
//! A tableau is the coefficient set (A, b, c) of an explicit scheme: strictly
//! lower-triangular stage matrix, weights summing to one, nodes equal to the
//! stage row sums. The registry carries every scheme the solver exposes, from
//! the 1-stage Euler identity up to the fourth-order families, plus the two
//! published rectified-flow variants (`rf_solver`, `fireflow_midpoint`).

use alloc::borrow::ToOwned;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Weight-sum and row-sum consistency tolerance.
pub const CONSISTENCY_TOL: f64 = 1e-8;
/// Order-condition residual tolerance (Ralston's fourth-order tableau is
/// printed to eight decimals, so 1e-7 is as tight as its residuals go).
pub const ORDER_TOL: f64 = 1e-7;
/// Highest order the classifier checks.
pub const MAX_ORDER: u8 = 4;

#[derive(Clone, Debug, PartialEq)]
pub enum TableauError {
    UnknownName { name: String },
    Dimension { what: &'static str, expected: usize, got: usize },
    Invalid { name: String, violations: Vec<Violation> },
}

impl fmt::Display for TableauError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TableauError::UnknownName { name } => {
                write!(f, "unknown tableau '{name}'; valid names: ")?;
                for (i, n) in REGISTRY_NAMES.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{n}")?;
                }
                Ok(())
            }
            TableauError::Dimension { what, expected, got } => {
                write!(f, "tableau dimension error: {what} has length {got}, expected {expected}")
            }
            TableauError::Invalid { name, violations } => {
                write!(f, "tableau '{name}' violates {} invariant(s): ", violations.len())?;
                for (i, v) in violations.iter().enumerate() {
                    if i > 0 {
                        write!(f, "; ")?;
                    }
                    write!(f, "{v}")?;
                }
                Ok(())
            }
        }
    }
}

impl core::error::Error for TableauError {}

/// One violated tableau invariant, with the offending residual.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub what: String,
    pub residual: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (residual {:e})", self.what, self.residual)
    }
}

/// Coefficients (A, b, c) of one explicit RK scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct ButcherTableau {
    name: String,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    c: Vec<f64>,
}

impl ButcherTableau {
    /// Dimension-checked constructor. `a` must be r rows of r entries.
    pub fn new(
        name: impl Into<String>,
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
        c: Vec<f64>,
    ) -> Result<Self, TableauError> {
        let r = b.len();
        if r == 0 {
            return Err(TableauError::Dimension { what: "b", expected: 1, got: 0 });
        }
        if c.len() != r {
            return Err(TableauError::Dimension { what: "c", expected: r, got: c.len() });
        }
        if a.len() != r {
            return Err(TableauError::Dimension { what: "a (rows)", expected: r, got: a.len() });
        }
        for row in &a {
            if row.len() != r {
                return Err(TableauError::Dimension {
                    what: "a (row width)",
                    expected: r,
                    got: row.len(),
                });
            }
        }
        Ok(ButcherTableau { name: name.into(), a, b, c })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Stage count.
    pub fn r(&self) -> usize {
        self.b.len()
    }

    #[inline]
    pub fn a(&self, s: usize, j: usize) -> f64 {
        self.a[s][j]
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn a_rows(&self) -> &[Vec<f64>] {
        &self.a
    }

    /// True for the midpoint-with-terminal-weight shape required by slope
    /// reuse (2 stages, b = [0, 1]).
    pub fn supports_reuse(&self) -> bool {
        self.r() == 2 && self.b[0] == 0.0 && self.b[1] == 1.0
    }
}

/// Registry names in presentation order.
pub const REGISTRY_NAMES: [&str; 14] = [
    "euler",
    "rf_solver",
    "fireflow_midpoint",
    "heun2",
    "midpoint2",
    "ralston2",
    "kutta3",
    "heun3",
    "ralston3",
    "houwen3",
    "ssprk3",
    "classic4",
    "three_eighths4",
    "ralston4",
];

/// Order each registry scheme is advertised at by its source method.
/// `classify_order` agrees everywhere except `rf_solver`, whose printed
/// weights fail the order-2 quadrature condition (b.c = 1/8, not 1/2).
pub fn advertised_order(name: &str) -> Option<u8> {
    Some(match name {
        "euler" => 1,
        "rf_solver" | "fireflow_midpoint" | "heun2" | "midpoint2" | "ralston2" => 2,
        "kutta3" | "heun3" | "ralston3" | "houwen3" | "ssprk3" => 3,
        "classic4" | "three_eighths4" | "ralston4" => 4,
        _ => return None,
    })
}

/// Look up a registry tableau by name.
pub fn registry_get(name: &str) -> Result<ButcherTableau, TableauError> {
    let t = match name {
        "euler" => ButcherTableau::new("euler", vec![vec![0.0]], vec![1.0], vec![0.0]),
        "rf_solver" => ButcherTableau::new(
            "rf_solver",
            vec![vec![0.0, 0.0], vec![0.5, 0.0]],
            vec![0.75, 0.25],
            vec![0.0, 0.5],
        ),
        "fireflow_midpoint" => ButcherTableau::new(
            "fireflow_midpoint",
            vec![vec![0.0, 0.0], vec![0.5, 0.0]],
            vec![0.0, 1.0],
            vec![0.0, 0.5],
        ),
        "heun2" => ButcherTableau::new(
            "heun2",
            vec![vec![0.0, 0.0], vec![1.0, 0.0]],
            vec![0.5, 0.5],
            vec![0.0, 1.0],
        ),
        "midpoint2" => ButcherTableau::new(
            "midpoint2",
            vec![vec![0.0, 0.0], vec![0.5, 0.0]],
            vec![0.0, 1.0],
            vec![0.0, 0.5],
        ),
        "ralston2" => ButcherTableau::new(
            "ralston2",
            vec![vec![0.0, 0.0], vec![2.0 / 3.0, 0.0]],
            vec![0.25, 0.75],
            vec![0.0, 2.0 / 3.0],
        ),
        "kutta3" => ButcherTableau::new(
            "kutta3",
            vec![vec![0.0, 0.0, 0.0], vec![0.5, 0.0, 0.0], vec![-1.0, 2.0, 0.0]],
            vec![1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0],
            vec![0.0, 0.5, 1.0],
        ),
        "heun3" => ButcherTableau::new(
            "heun3",
            vec![
                vec![0.0, 0.0, 0.0],
                vec![1.0 / 3.0, 0.0, 0.0],
                vec![0.0, 2.0 / 3.0, 0.0],
            ],
            vec![0.25, 0.0, 0.75],
            vec![0.0, 1.0 / 3.0, 2.0 / 3.0],
        ),
        "ralston3" => ButcherTableau::new(
            "ralston3",
            vec![vec![0.0, 0.0, 0.0], vec![0.5, 0.0, 0.0], vec![0.0, 0.75, 0.0]],
            vec![2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0],
            vec![0.0, 0.5, 0.75],
        ),
        "houwen3" => ButcherTableau::new(
            "houwen3",
            vec![
                vec![0.0, 0.0, 0.0],
                vec![8.0 / 15.0, 0.0, 0.0],
                vec![0.25, 5.0 / 12.0, 0.0],
            ],
            vec![0.25, 0.0, 0.75],
            vec![0.0, 8.0 / 15.0, 2.0 / 3.0],
        ),
        "ssprk3" => ButcherTableau::new(
            "ssprk3",
            vec![vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.25, 0.25, 0.0]],
            vec![1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
            vec![0.0, 1.0, 0.5],
        ),
        "classic4" => ButcherTableau::new(
            "classic4",
            vec![
                vec![0.0, 0.0, 0.0, 0.0],
                vec![0.5, 0.0, 0.0, 0.0],
                vec![0.0, 0.5, 0.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0],
            ],
            vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            vec![0.0, 0.5, 0.5, 1.0],
        ),
        "three_eighths4" => ButcherTableau::new(
            "three_eighths4",
            vec![
                vec![0.0, 0.0, 0.0, 0.0],
                vec![1.0 / 3.0, 0.0, 0.0, 0.0],
                vec![-1.0 / 3.0, 1.0, 0.0, 0.0],
                vec![1.0, -1.0, 1.0, 0.0],
            ],
            vec![0.125, 0.375, 0.375, 0.125],
            vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0],
        ),
        "ralston4" => ButcherTableau::new(
            "ralston4",
            vec![
                vec![0.0, 0.0, 0.0, 0.0],
                vec![0.4, 0.0, 0.0, 0.0],
                vec![0.29697761, 0.15875964, 0.0, 0.0],
                vec![0.21810040, -3.05096516, 3.83286476, 0.0],
            ],
            vec![0.17476028, -0.55148066, 1.20553560, 0.17118478],
            vec![0.0, 0.4, 0.45573725, 1.0],
        ),
        other => return Err(TableauError::UnknownName { name: other.to_owned() }),
    };
    Ok(t.expect("registry coefficients are dimension-consistent"))
}

/// Check the explicit-scheme invariants. Violations are data, not failures:
/// the list is empty iff the tableau is well formed.
pub fn validate_tableau(t: &ButcherTableau) -> Vec<Violation> {
    let mut out = Vec::new();
    let r = t.r();

    for s in 0..r {
        for j in s..r {
            let v = t.a(s, j);
            if v != 0.0 {
                out.push(Violation {
                    what: alloc::format!(
                        "a[{}][{}] = {v} must be 0 (strictly lower triangular)",
                        s + 1,
                        j + 1
                    ),
                    residual: libm::fabs(v),
                });
            }
        }
    }

    let bsum: f64 = t.b().iter().sum();
    if libm::fabs(bsum - 1.0) > CONSISTENCY_TOL {
        out.push(Violation {
            what: alloc::format!("weight sum {bsum} must equal 1"),
            residual: libm::fabs(bsum - 1.0),
        });
    }

    for s in 0..r {
        let rowsum: f64 = (0..r).map(|j| t.a(s, j)).sum();
        let res = libm::fabs(rowsum - t.c()[s]);
        if res > CONSISTENCY_TOL {
            out.push(Violation {
                what: alloc::format!(
                    "row sum {} of stage {} must equal c[{}] = {}",
                    rowsum,
                    s + 1,
                    s + 1,
                    t.c()[s]
                ),
                residual: res,
            });
        }
    }

    if t.c()[0] != 0.0 {
        out.push(Violation {
            what: alloc::format!("c[1] = {} must be 0", t.c()[0]),
            residual: libm::fabs(t.c()[0]),
        });
    }

    out
}

/// Residuals of the standard explicit-RK order conditions up to order 4.
#[derive(Clone, Debug, PartialEq)]
pub struct OrderReport {
    pub tableau: String,
    pub satisfied_order: u8,
    /// (condition label, |residual|) for every condition up to order 4.
    pub condition_residuals: Vec<(String, f64)>,
}

fn weighted_dot(b: &[f64], x: &[f64]) -> f64 {
    b.iter().zip(x).map(|(w, v)| w * v).sum()
}

/// Classify the largest order p <= 4 whose conditions all hold within
/// [`ORDER_TOL`]. Requires a valid tableau.
pub fn classify_order(t: &ButcherTableau) -> Result<OrderReport, TableauError> {
    let violations = validate_tableau(t);
    if !violations.is_empty() {
        return Err(TableauError::Invalid { name: t.name().to_owned(), violations });
    }

    let r = t.r();
    let b = t.b();
    let c = t.c();

    // Elementary weight helpers over the stage graph.
    let ac: Vec<f64> = (0..r).map(|s| (0..r).map(|j| t.a(s, j) * c[j]).sum()).collect();
    let ac2: Vec<f64> = (0..r).map(|s| (0..r).map(|j| t.a(s, j) * c[j] * c[j]).sum()).collect();
    let aac: Vec<f64> = (0..r).map(|s| (0..r).map(|j| t.a(s, j) * ac[j]).sum()).collect();

    let c2: Vec<f64> = c.iter().map(|v| v * v).collect();
    let c3: Vec<f64> = c.iter().map(|v| v * v * v).collect();
    let cac: Vec<f64> = c.iter().zip(&ac).map(|(x, y)| x * y).collect();

    // (label, order, residual)
    let conditions: [(&str, u8, f64); 8] = [
        ("p1: sum(b) = 1", 1, weighted_dot(b, &vec![1.0; r]) - 1.0),
        ("p2: b.c = 1/2", 2, weighted_dot(b, c) - 0.5),
        ("p3: b.c^2 = 1/3", 3, weighted_dot(b, &c2) - 1.0 / 3.0),
        ("p3: b.(A c) = 1/6", 3, weighted_dot(b, &ac) - 1.0 / 6.0),
        ("p4: b.c^3 = 1/4", 4, weighted_dot(b, &c3) - 0.25),
        ("p4: b.(c*A c) = 1/8", 4, weighted_dot(b, &cac) - 0.125),
        ("p4: b.(A c^2) = 1/12", 4, weighted_dot(b, &ac2) - 1.0 / 12.0),
        ("p4: b.(A A c) = 1/24", 4, weighted_dot(b, &aac) - 1.0 / 24.0),
    ];

    let mut satisfied_order = 0u8;
    for p in 1..=MAX_ORDER {
        let ok = conditions
            .iter()
            .filter(|(_, order, _)| *order == p)
            .all(|(_, _, res)| libm::fabs(*res) < ORDER_TOL);
        if ok {
            satisfied_order = p;
        } else {
            break;
        }
    }

    Ok(OrderReport {
        tableau: t.name().to_owned(),
        satisfied_order,
        condition_residuals: conditions
            .iter()
            .map(|(label, _, res)| ((*label).to_owned(), libm::fabs(*res)))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_covers_all_names() {
        for name in REGISTRY_NAMES {
            let t = registry_get(name).unwrap();
            assert_eq!(t.name(), name);
            assert!(advertised_order(name).is_some());
        }
    }

    #[test]
    fn unknown_name_lists_valid_ones() {
        let err = registry_get("rk5").unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("rk5"));
        assert!(msg.contains("three_eighths4"));
        assert!(msg.contains("euler"));
    }

    #[test]
    fn printed_coefficients_match_source() {
        let heun2 = registry_get("heun2").unwrap();
        assert_eq!(heun2.a_rows(), &[vec![0.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(heun2.b(), &[0.5, 0.5]);
        assert_eq!(heun2.c(), &[0.0, 1.0]);

        let te = registry_get("three_eighths4").unwrap();
        assert_eq!(te.b(), &[0.125, 0.375, 0.375, 0.125]);
        assert_eq!(te.c(), &[0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);

        let rf = registry_get("rf_solver").unwrap();
        assert_eq!(rf.a_rows(), &[vec![0.0, 0.0], vec![0.5, 0.0]]);
        assert_eq!(rf.b(), &[0.75, 0.25]);
        assert_eq!(rf.c(), &[0.0, 0.5]);

        let euler = registry_get("euler").unwrap();
        assert_eq!(euler.r(), 1);
        assert_eq!(euler.b(), &[1.0]);
        assert_eq!(euler.c(), &[0.0]);
    }

    #[test]
    fn every_registry_tableau_validates() {
        for name in REGISTRY_NAMES {
            let t = registry_get(name).unwrap();
            let v = validate_tableau(&t);
            assert!(v.is_empty(), "{name}: {v:?}");
        }
    }

    #[test]
    fn ralston4_row_sums_within_print_precision() {
        // Row 3 of the printed decimals: 0.29697761 + 0.15875964 = 0.45573725.
        let t = registry_get("ralston4").unwrap();
        let row3: f64 = (0..4).map(|j| t.a(2, j)).sum();
        assert!((row3 - 0.45573725).abs() < 1e-7);
        assert!(validate_tableau(&t).is_empty());
    }

    #[test]
    fn bad_weight_sum_is_reported() {
        let t = ButcherTableau::new(
            "bad",
            vec![vec![0.0, 0.0], vec![1.0, 0.0]],
            vec![0.6, 0.6],
            vec![0.0, 1.0],
        )
        .unwrap();
        let v = validate_tableau(&t);
        assert_eq!(v.len(), 1);
        assert!(v[0].what.contains("weight sum"));
        assert!((v[0].residual - 0.2).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let err = ButcherTableau::new(
            "bad",
            vec![vec![0.0, 0.0], vec![1.0, 0.0]],
            vec![0.5, 0.25, 0.25],
            vec![0.0, 1.0],
        )
        .unwrap_err();
        assert!(matches!(err, TableauError::Dimension { what: "c", .. }));
    }

    #[test]
    fn upper_triangular_entry_rejected() {
        let t = ButcherTableau::new(
            "implicit",
            vec![vec![0.0, 0.5], vec![0.5, 0.0]],
            vec![0.5, 0.5],
            vec![0.5, 0.5],
        )
        .unwrap();
        let v = validate_tableau(&t);
        assert!(v.iter().any(|x| x.what.contains("lower triangular")));
        assert!(v.iter().any(|x| x.what.contains("c[1]")));
    }

    // Hand-evaluated order conditions freeze the classifier's expectations.
    #[test]
    fn kutta3_order_three_by_hand() {
        // b.c = 0*1/6 + 1/2*2/3 + 1*1/6 = 1/2.
        let t = registry_get("kutta3").unwrap();
        let bc: f64 = t.b().iter().zip(t.c()).map(|(b, c)| b * c).sum();
        assert!((bc - 0.5).abs() < 1e-15);
        let rep = classify_order(&t).unwrap();
        assert_eq!(rep.satisfied_order, 3);
    }

    #[test]
    fn rf_solver_fails_order_two_arithmetically() {
        // b.c = 3/4*0 + 1/4*1/2 = 1/8, not 1/2: first-order only.
        let t = registry_get("rf_solver").unwrap();
        let bc: f64 = t.b().iter().zip(t.c()).map(|(b, c)| b * c).sum();
        assert!((bc - 0.125).abs() < 1e-15);
        let rep = classify_order(&t).unwrap();
        assert_eq!(rep.satisfied_order, 1);
        let p2 = rep.condition_residuals.iter().find(|(l, _)| l.starts_with("p2")).unwrap();
        assert!((p2.1 - 0.375).abs() < 1e-15);
    }

    #[test]
    fn advertised_orders_match_classification_except_rf_solver() {
        for name in REGISTRY_NAMES {
            let t = registry_get(name).unwrap();
            let rep = classify_order(&t).unwrap();
            let adv = advertised_order(name).unwrap();
            if name == "rf_solver" {
                assert_eq!(rep.satisfied_order, 1);
                assert_eq!(adv, 2);
            } else {
                assert_eq!(rep.satisfied_order, adv, "{name}");
            }
        }
    }

    #[test]
    fn classify_rejects_invalid_tableau() {
        let t = ButcherTableau::new(
            "bad",
            vec![vec![0.0, 0.0], vec![1.0, 0.0]],
            vec![0.6, 0.6],
            vec![0.0, 1.0],
        )
        .unwrap();
        assert!(matches!(classify_order(&t), Err(TableauError::Invalid { .. })));
    }

    #[test]
    fn reuse_shape_detection() {
        assert!(registry_get("fireflow_midpoint").unwrap().supports_reuse());
        assert!(registry_get("midpoint2").unwrap().supports_reuse());
        assert!(!registry_get("heun2").unwrap().supports_reuse());
        assert!(!registry_get("euler").unwrap().supports_reuse());
    }
}
