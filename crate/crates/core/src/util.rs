use crate::rays::Vec3;

pub(crate) fn logistic(x: f64) -> f64 {
    augnerf_autodiff::sigmoid(x)
}

pub(crate) fn distance(a: Vec3, b: Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}
