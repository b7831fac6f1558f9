/// Panel count used for every time integral of the coefficient schedules.
pub const SIMPSON_PANELS: usize = 1000;

/// Composite Simpson rule on `[a, b]` with `panels` subintervals (rounded up
/// to an even count).
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    if b == a {
        return 0.0;
    }
    let n = (panels.max(2) + 1) & !1;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for k in 1..n {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + k as f64 * h);
    }
    acc * h / 3.0
}

/// Simpson nodes and weights on `[a, b]`, for integrands evaluated many times
/// against the same grid.
pub fn simpson_nodes(a: f64, b: f64, panels: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (panels.max(2) + 1) & !1;
    let h = (b - a) / n as f64;
    let nodes = (0..=n).map(|k| a + k as f64 * h).collect();
    let weights = (0..=n)
        .map(|k| {
            let w = if k == 0 || k == n {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            w * h / 3.0
        })
        .collect();
    (nodes, weights)
}
