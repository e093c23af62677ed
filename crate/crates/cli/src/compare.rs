//! Joins a theory table with an MC table and reports deviations in standard errors.

use std::collections::HashMap;

use crate::error::{usage, CliError};
use crate::output::{Cell, ReadTable, Table};

const KEYS: [&str; 5] = ["axis", "x", "estimator", "lambda_rule", "scaling"];

/// Theory column and the MC column prefix it is compared with.
fn metric_pairs(theory: &ReadTable) -> Vec<(String, String)> {
    let mut out = vec![("gen_error".to_string(), "gen_error".to_string()), ("gen_loss".to_string(), "gen_loss".to_string())];
    out.extend(theory.columns.iter().filter(|c| c.starts_with("calibration_")).map(|c| (c.clone(), c.clone())));
    out.push(("m".into(), "m_emp".into()));
    out.push(("q".into(), "q_emp".into()));
    out
}

fn key(row: &[String], idx: &[usize]) -> Vec<String> {
    idx.iter()
        .zip(KEYS)
        .map(|(&i, k)| {
            let v = &row[i];
            // grid values compare as numbers
            if k == "x" {
                v.parse::<f64>().map(|x| format!("{x:e}")).unwrap_or_else(|_| v.clone())
            } else {
                v.clone()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub table: Table,
    pub max_abs_z: f64,
    pub unmatched: usize,
}

pub fn compare(theory: &ReadTable, mc: &ReadTable) -> Result<Comparison, CliError> {
    let t_idx: Vec<usize> = KEYS.iter().map(|k| theory.col(k)).collect::<Option<_>>().ok_or_else(|| CliError::Usage("theory table lacks key columns".into()))?;
    let m_idx: Vec<usize> = KEYS.iter().map(|k| mc.col(k)).collect::<Option<_>>().ok_or_else(|| CliError::Usage("mc table lacks key columns".into()))?;
    if mc.col("gen_error_mean").is_none() {
        return usage("second table is not an mc-sweep table");
    }
    let lookup: HashMap<Vec<String>, &Vec<String>> = theory.rows.iter().map(|r| (key(r, &t_idx), r)).collect();
    let pairs: Vec<(usize, usize, usize, String)> = metric_pairs(theory)
        .into_iter()
        .filter_map(|(tc, mcol)| Some((theory.col(&tc)?, mc.col(&format!("{mcol}_mean"))?, mc.col(&format!("{mcol}_se"))?, tc)))
        .collect();
    let cols = ["axis", "x", "estimator", "lambda_rule", "scaling", "metric", "theory", "mc_mean", "mc_se", "z", "status"];
    let mut table = Table::new("compare", cols.iter().map(|s| s.to_string()).collect());
    let mut max_abs_z: f64 = 0.0;
    let mut unmatched = 0;
    for row in &mc.rows {
        let k = key(row, &m_idx);
        let prefix: Vec<Cell> = m_idx.iter().map(|&i| Cell::Text(row[i].clone())).collect();
        let Some(trow) = lookup.get(&k) else {
            unmatched += 1;
            let mut r = prefix;
            r.extend([Cell::Empty, Cell::Empty, Cell::Empty, Cell::Empty, Cell::Empty, "unmatched".into()]);
            table.push(r);
            continue;
        };
        for (ti, mi, si, name) in &pairs {
            let th = trow[*ti].parse::<f64>().ok();
            let mean = row[*mi].parse::<f64>().ok();
            let se = row[*si].parse::<f64>().ok();
            let z = match (th, mean, se) {
                (Some(t), Some(m), Some(s)) if s > 0.0 => Some((m - t) / s),
                _ => None,
            };
            if let Some(z) = z {
                max_abs_z = max_abs_z.max(z.abs());
            }
            let status = if th.is_none() || mean.is_none() { "missing" } else { "ok" };
            if status == "missing" {
                unmatched += 1;
            }
            let mut r = prefix.clone();
            r.extend([Cell::Text(name.clone()), Cell::opt(th), Cell::opt(mean), Cell::opt(se), Cell::opt(z), status.into()]);
            table.push(r);
        }
    }
    Ok(Comparison { table, max_abs_z, unmatched })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joins_on_keys() {
        let theory = "# rfcal theory-sweep schema v1\naxis,x,estimator,lambda_rule,scaling,gen_error,gen_loss,m,q,calibration_0.75\n\
                      p_over_n,1,erm,error,none,0.40,0.65,1.0,2.0,0.1\n";
        let mc = "# rfcal mc-sweep schema v1\naxis,x,estimator,lambda_rule,scaling,gen_error_mean,gen_error_se,gen_loss_mean,gen_loss_se,calibration_0.75_mean,calibration_0.75_se,m_emp_mean,m_emp_se,q_emp_mean,q_emp_se\n\
                  p_over_n,1.0,erm,error,none,0.41,0.005,0.65,,0.1,0.01,1.0,0.1,2.0,0.1\n\
                  p_over_n,2,erm,error,none,0.41,0.005,0.65,0.01,0.1,0.01,1.0,0.1,2.0,0.1\n";
        let c = compare(&ReadTable::parse(theory).unwrap(), &ReadTable::parse(mc).unwrap()).unwrap();
        assert!((c.max_abs_z - 2.0).abs() < 1e-9, "{}", c.max_abs_z);
        assert_eq!(c.unmatched, 1);
        // gen_loss without an SE has no z
        assert_eq!(c.table.rows[1][9], Cell::Empty);
    }
}
