//! Nelder–Mead simplex minimization.

#[derive(Debug, Clone)]
pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NelderMead {
    pub max_iter: usize,
    /// Stop when the spread of simplex values falls below this.
    pub f_tol: f64,
    pub initial_step: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        Self {
            max_iter: 4000,
            f_tol: 1e-18,
            initial_step: 0.5,
        }
    }
}

impl NelderMead {
    pub fn minimize<F: Fn(&[f64]) -> f64>(&self, f: F, x0: &[f64]) -> Minimum {
        let n = x0.len();
        let eval = |x: &[f64]| {
            let v = f(x);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        };
        let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
        simplex.push(x0.to_vec());
        for i in 0..n {
            let mut x = x0.to_vec();
            x[i] += self.initial_step;
            simplex.push(x);
        }
        let mut values: Vec<f64> = simplex.iter().map(|x| eval(x)).collect();

        for _ in 0..self.max_iter {
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            values = order.iter().map(|&i| values[i]).collect();

            let spread = (values[n] - values[0]).abs();
            let size = simplex[1..]
                .iter()
                .map(|x| x.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if spread <= self.f_tol && size < 1e-9 {
                break;
            }
            if size < 1e-13 {
                break;
            }

            let centroid: Vec<f64> = (0..n)
                .map(|j| simplex[..n].iter().map(|x| x[j]).sum::<f64>() / n as f64)
                .collect();
            let along = |t: f64| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(&simplex[n])
                    .map(|(c, w)| c + t * (w - c))
                    .collect()
            };

            let xr = along(-1.0);
            let fr = eval(&xr);
            if fr < values[0] {
                let xe = along(-2.0);
                let fe = eval(&xe);
                if fe < fr {
                    simplex[n] = xe;
                    values[n] = fe;
                } else {
                    simplex[n] = xr;
                    values[n] = fr;
                }
                continue;
            }
            if fr < values[n - 1] {
                simplex[n] = xr;
                values[n] = fr;
                continue;
            }
            let (xc, fc) = if fr < values[n] {
                let xc = along(-0.5);
                let fc = eval(&xc);
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = eval(&xc);
                (xc, fc)
            };
            if fc < values[n].min(fr) {
                simplex[n] = xc;
                values[n] = fc;
                continue;
            }
            // shrink toward the best vertex
            for i in 1..=n {
                let shrunk: Vec<f64> = simplex[i]
                    .iter()
                    .zip(&simplex[0])
                    .map(|(x, b)| b + 0.5 * (x - b))
                    .collect();
                values[i] = eval(&shrunk);
                simplex[i] = shrunk;
            }
        }
        let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b])).unwrap_or(0);
        Minimum {
            x: simplex[best].clone(),
            value: values[best],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = NelderMead::default().minimize(f, &[-1.2, 1.0]);
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5, "{:?}", m.x);
    }

    #[test]
    fn never_worse_than_start() {
        let f = |x: &[f64]| x.iter().map(|v| (v - 3.0).powi(2)).sum::<f64>();
        let x0 = [0.0, 0.0, 0.0];
        let m = NelderMead::default().minimize(f, &x0);
        assert!(m.value <= f(&x0));
        assert!(m.value < 1e-12);
    }
}
