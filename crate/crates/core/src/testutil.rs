//! Shared test fixtures.

pub mod golden {
    pub const ENCODE_POOLED: &[f64] = &[
        -0.0003099206765890909,
        -0.0030047210767658906,
        -0.0025045253898832165,
        0.0008216204585414379,
        -0.0002919530559067441,
        0.00026667946775285004,
        1.8695336148902275e-5,
        0.0013895588511677257,
    ];
    pub const FUSE_ALL: &[f64] = &[
        -0.5371433489237541,
        -0.006683356744227758,
        0.2672608584464976,
        0.046585417067433105,
        -0.07367637751568817,
        0.26060892626852983,
        0.08115712672708554,
        -0.038109245325876354,
    ];
}
