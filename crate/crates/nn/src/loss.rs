//! Losses over row-major `N×K` logits. Each returns the batch-mean loss and the
//! gradient with respect to the logits it was given.

fn log_softmax_row(row: &[f32], temperature: f32, out: &mut [f64]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let t = temperature as f64;
    let lse = row.iter().map(|&v| ((v as f64 - max) / t).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v as f64 - max) / t - lse;
    }
}

/// Softmax cross-entropy against integer targets.
pub fn cross_entropy(logits: &[f32], classes: usize, targets: &[usize]) -> (f32, Vec<f32>) {
    let n = targets.len();
    assert_eq!(logits.len(), n * classes, "logit/target mismatch");
    let mut grad = vec![0.0f32; logits.len()];
    let mut total = 0.0f64;
    let mut lsm = vec![0.0f64; classes];
    for (i, &t) in targets.iter().enumerate() {
        assert!(t < classes, "target {t} outside {classes} classes");
        let row = &logits[i * classes..(i + 1) * classes];
        log_softmax_row(row, 1.0, &mut lsm);
        total -= lsm[t];
        for (k, g) in grad[i * classes..(i + 1) * classes].iter_mut().enumerate() {
            let p = lsm[k].exp();
            *g = ((p - if k == t { 1.0 } else { 0.0 }) / n as f64) as f32;
        }
    }
    ((total / n as f64) as f32, grad)
}

/// Knowledge distillation: cross-entropy between temperature-softened teacher
/// and student distributions, `−Σ softmax(t/T)·log_softmax(s/T)`, averaged over
/// the batch.
pub fn distillation(student: &[f32], teacher: &[f32], classes: usize, temperature: f32) -> (f32, Vec<f32>) {
    assert_eq!(student.len(), teacher.len(), "student/teacher mismatch");
    let n = student.len() / classes;
    let mut grad = vec![0.0f32; student.len()];
    let mut total = 0.0f64;
    let mut ls = vec![0.0f64; classes];
    let mut lt = vec![0.0f64; classes];
    for i in 0..n {
        let range = i * classes..(i + 1) * classes;
        log_softmax_row(&student[range.clone()], temperature, &mut ls);
        log_softmax_row(&teacher[range.clone()], temperature, &mut lt);
        for (k, g) in grad[range].iter_mut().enumerate() {
            let q = lt[k].exp();
            total -= q * ls[k];
            *g = ((ls[k].exp() - q) / (temperature as f64 * n as f64)) as f32;
        }
    }
    ((total / n as f64) as f32, grad)
}
