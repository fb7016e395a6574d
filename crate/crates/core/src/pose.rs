//! Landmark sequences: validation, temporal smoothing, height normalization.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use num_traits::Float;
use serde::{Deserialize, Serialize};

/// Landmarks per frame; indices follow the standard 33-point pose topology.
pub const LANDMARK_COUNT: usize = 33;

pub const LEFT_SHOULDER: usize = 11;
pub const RIGHT_SHOULDER: usize = 12;
pub const LEFT_ELBOW: usize = 13;
pub const RIGHT_ELBOW: usize = 14;
pub const LEFT_WRIST: usize = 15;
pub const RIGHT_WRIST: usize = 16;
pub const LEFT_INDEX: usize = 19;
pub const RIGHT_INDEX: usize = 20;
pub const LEFT_HIP: usize = 23;
pub const RIGHT_HIP: usize = 24;
pub const LEFT_KNEE: usize = 25;
pub const RIGHT_KNEE: usize = 26;
pub const LEFT_ANKLE: usize = 27;
pub const RIGHT_ANKLE: usize = 28;
pub const LEFT_HEEL: usize = 29;
pub const RIGHT_HEEL: usize = 30;
pub const LEFT_FOOT_INDEX: usize = 31;
pub const RIGHT_FOOT_INDEX: usize = 32;
pub const LEFT_EAR: usize = 7;
pub const RIGHT_EAR: usize = 8;

/// Landmark names in index order.
pub const LANDMARK_NAMES: [&str; LANDMARK_COUNT] = [
    "nose",
    "left_eye_inner",
    "left_eye",
    "left_eye_outer",
    "right_eye_inner",
    "right_eye",
    "right_eye_outer",
    "left_ear",
    "right_ear",
    "mouth_left",
    "mouth_right",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_pinky",
    "right_pinky",
    "left_index",
    "right_index",
    "left_thumb",
    "right_thumb",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
    "left_heel",
    "right_heel",
    "left_foot_index",
    "right_foot_index",
];

/// World-space landmark position; y is the vertical (gravity) axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Landmark3D {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// One frame of landmarks: 33 world positions, 33 pixel anchors, and
/// per-landmark visibility in [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub index: usize,
    pub landmarks3d: Vec<Landmark3D>,
    pub landmarks2d: Vec<[f64; 2]>,
    pub visibility: Vec<f64>,
}

/// Per-subject landmark time series with fall-onset metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSequence {
    pub subject_id: String,
    pub fps: f64,
    pub frames: Vec<PoseFrame>,
    pub fall_onset_frame: Option<usize>,
    pub activity_label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PoseError {
    InvariantViolation {
        frame: Option<usize>,
        message: String,
    },
    WindowTooLarge {
        window: usize,
        length: usize,
    },
    InvalidOrder {
        window: usize,
        poly_order: usize,
    },
    NonPositiveHeight,
    EmptySequence,
}

impl fmt::Display for PoseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvariantViolation { frame, message } => match frame {
                Some(i) => write!(f, "invariant violation at frame {i}: {message}"),
                None => write!(f, "invariant violation: {message}"),
            },
            Self::WindowTooLarge { window, length } => {
                write!(f, "smoothing window {window} exceeds sequence length {length}")
            }
            Self::InvalidOrder { window, poly_order } => write!(
                f,
                "window must be odd and greater than poly_order (window {window}, order {poly_order})"
            ),
            Self::NonPositiveHeight => write!(f, "subject height must be positive and finite"),
            Self::EmptySequence => write!(f, "sequence has no frames"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for PoseError {}

impl PoseSequence {
    /// Checks every type invariant; reports the first offending frame.
    pub fn validate(&self) -> Result<(), PoseError> {
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(PoseError::InvariantViolation {
                frame: None,
                message: String::from("fps must be positive and finite"),
            });
        }
        if let Some(onset) = self.fall_onset_frame {
            if onset >= self.frames.len() {
                return Err(PoseError::InvariantViolation {
                    frame: None,
                    message: alloc::format!(
                        "fall_onset_frame {onset} outside [0, {})",
                        self.frames.len()
                    ),
                });
            }
        }
        let mut prev: Option<usize> = None;
        for frame in &self.frames {
            let at = Some(frame.index);
            if frame.landmarks3d.len() != LANDMARK_COUNT {
                return Err(PoseError::InvariantViolation {
                    frame: at,
                    message: alloc::format!(
                        "expected {LANDMARK_COUNT} 3d landmarks, got {}",
                        frame.landmarks3d.len()
                    ),
                });
            }
            if frame.landmarks2d.len() != LANDMARK_COUNT {
                return Err(PoseError::InvariantViolation {
                    frame: at,
                    message: alloc::format!(
                        "expected {LANDMARK_COUNT} 2d landmarks, got {}",
                        frame.landmarks2d.len()
                    ),
                });
            }
            if frame.visibility.len() != LANDMARK_COUNT {
                return Err(PoseError::InvariantViolation {
                    frame: at,
                    message: alloc::format!(
                        "expected {LANDMARK_COUNT} visibility entries, got {}",
                        frame.visibility.len()
                    ),
                });
            }
            if let Some(bad) = frame.landmarks3d.iter().position(|l| !l.is_finite()) {
                return Err(PoseError::InvariantViolation {
                    frame: at,
                    message: alloc::format!("non-finite 3d landmark {bad}"),
                });
            }
            if let Some(bad) = frame
                .landmarks2d
                .iter()
                .position(|p| !(p[0].is_finite() && p[1].is_finite() && p[0] >= 0.0 && p[1] >= 0.0))
            {
                return Err(PoseError::InvariantViolation {
                    frame: at,
                    message: alloc::format!("2d landmark {bad} must be finite and non-negative"),
                });
            }
            if let Some(bad) = frame
                .visibility
                .iter()
                .position(|&v| !(0.0..=1.0).contains(&v))
            {
                return Err(PoseError::InvariantViolation {
                    frame: at,
                    message: alloc::format!("visibility {bad} outside [0, 1]"),
                });
            }
            if let Some(p) = prev {
                if frame.index <= p {
                    return Err(PoseError::InvariantViolation {
                        frame: at,
                        message: alloc::format!(
                            "frame indices must be strictly increasing ({p} then {})",
                            frame.index
                        ),
                    });
                }
            }
            prev = Some(frame.index);
        }
        Ok(())
    }
}

/// Least-squares smoothing weights for a centered window: the filter output
/// is the value at the window center of the best-fit polynomial of the given
/// order.
pub fn savgol_coeffs(window: usize, poly_order: usize) -> Vec<f64> {
    assert!(window % 2 == 1 && window > poly_order);
    let half = (window / 2) as isize;
    let m = poly_order + 1;
    // G = AᵀA for the Vandermonde A over positions -half..=half
    let mut g = vec![0.0f64; m * m];
    for i in -half..=half {
        let x = i as f64;
        let mut pows = vec![1.0f64; m];
        for p in 1..m {
            pows[p] = pows[p - 1] * x;
        }
        for r in 0..m {
            for c in 0..m {
                g[r * m + c] += pows[r] * pows[c];
            }
        }
    }
    // solve G z = e0 by Gauss-Jordan with partial pivoting
    let mut aug = vec![0.0f64; m * (m + 1)];
    for r in 0..m {
        for c in 0..m {
            aug[r * (m + 1) + c] = g[r * m + c];
        }
    }
    aug[m] = 1.0;
    for col in 0..m {
        let mut piv = col;
        for r in col + 1..m {
            if aug[r * (m + 1) + col].abs() > aug[piv * (m + 1) + col].abs() {
                piv = r;
            }
        }
        if piv != col {
            for c in 0..=m {
                aug.swap(col * (m + 1) + c, piv * (m + 1) + c);
            }
        }
        let d = aug[col * (m + 1) + col];
        for r in 0..m {
            if r == col {
                continue;
            }
            let f = aug[r * (m + 1) + col] / d;
            for c in col..=m {
                aug[r * (m + 1) + c] -= f * aug[col * (m + 1) + c];
            }
        }
    }
    let z: Vec<f64> = (0..m)
        .map(|r| aug[r * (m + 1) + m] / aug[r * (m + 1) + r])
        .collect();
    // w_i = Σ_p x_i^p z_p
    (-half..=half)
        .map(|i| {
            let x = i as f64;
            let mut pw = 1.0;
            let mut acc = 0.0;
            for &zp in &z {
                acc += zp * pw;
                pw *= x;
            }
            acc
        })
        .collect()
}

/// Mirror index reflection without repeating the edge sample.
#[inline]
fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

/// Filters one channel with precomputed weights and mirror padding.
pub fn smooth_channel(xs: &[f64], coeffs: &[f64]) -> Vec<f64> {
    let half = (coeffs.len() / 2) as isize;
    (0..xs.len() as isize)
        .map(|t| {
            coeffs
                .iter()
                .enumerate()
                .map(|(k, &w)| w * xs[mirror(t + k as isize - half, xs.len())])
                .sum()
        })
        .collect()
}

/// Savitzky–Golay smoothing of every 3-D coordinate channel over time.
/// Output length equals input length (mirror padding); pixel anchors and
/// visibility pass through untouched.
pub fn smooth_savgol(
    seq: &PoseSequence,
    window: usize,
    poly_order: usize,
) -> Result<PoseSequence, PoseError> {
    if window % 2 == 0 || window <= poly_order {
        return Err(PoseError::InvalidOrder { window, poly_order });
    }
    if seq.frames.len() < window {
        return Err(PoseError::WindowTooLarge {
            window,
            length: seq.frames.len(),
        });
    }
    let coeffs = savgol_coeffs(window, poly_order);
    let n = seq.frames.len();
    let mut out = seq.clone();
    let mut channel = vec![0.0f64; n];
    for lm in 0..LANDMARK_COUNT {
        for axis in 0..3 {
            for (t, frame) in seq.frames.iter().enumerate() {
                let l = &frame.landmarks3d[lm];
                channel[t] = match axis {
                    0 => l.x,
                    1 => l.y,
                    _ => l.z,
                };
            }
            let smoothed = smooth_channel(&channel, &coeffs);
            for (t, frame) in out.frames.iter_mut().enumerate() {
                let l = &mut frame.landmarks3d[lm];
                match axis {
                    0 => l.x = smoothed[t],
                    1 => l.y = smoothed[t],
                    _ => l.z = smoothed[t],
                }
            }
        }
    }
    Ok(out)
}

/// Divides every 3-D coordinate by the subject's height; pixel coordinates
/// are untouched.
pub fn normalize_height(
    seq: &PoseSequence,
    subject_height: f64,
) -> Result<PoseSequence, PoseError> {
    if !(subject_height > 0.0 && subject_height.is_finite()) {
        return Err(PoseError::NonPositiveHeight);
    }
    let inv = 1.0 / subject_height;
    let mut out = seq.clone();
    for frame in &mut out.frames {
        for l in &mut frame.landmarks3d {
            l.x *= inv;
            l.y *= inv;
            l.z *= inv;
        }
    }
    Ok(out)
}

/// Height estimate: the maximum over frames of the vertical landmark extent.
pub fn estimate_height(seq: &PoseSequence) -> Result<f64, PoseError> {
    if seq.frames.is_empty() {
        return Err(PoseError::EmptySequence);
    }
    let mut best = 0.0f64;
    for frame in &seq.frames {
        let mut lo = f64::infinity();
        let mut hi = f64::neg_infinity();
        for l in &frame.landmarks3d {
            lo = lo.min(l.y);
            hi = hi.max(l.y);
        }
        best = best.max(hi - lo);
    }
    Ok(best)
}
