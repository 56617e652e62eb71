//! Analytic GPU utilization model for the prefill, decode and graph-ANN
//! stages.
//!
//! The plateau is the classic roofline ceiling `min(1, AI * B_mem / P_peak)`;
//! below the plateau utilization rises as `(x / x_sat)^alpha`, where `x` is
//! the batch size (LLM stages) or the number of concurrent queries (ANN).
//!
//! The shipped presets are illustrative defaults only. They are not
//! calibrated against any hardware measurement.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prefill,
    Decode,
    Ann,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Prefill => "prefill",
            Stage::Decode => "decode",
            Stage::Ann => "ann",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefill" => Ok(Stage::Prefill),
            "decode" => Ok(Stage::Decode),
            "ann" => Ok(Stage::Ann),
            other => Err(Error::input(format!(
                "unknown stage `{other}` (expected prefill|decode|ann)"
            ))),
        }
    }
}

/// Per-stage roofline parameters. Construct through [`StageRooflineParams::new`]
/// so the domain invariants always hold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageRooflineParams<T> {
    ai: T,
    mem_bw: T,
    peak_flops: T,
    x_sat: T,
    alpha: T,
    stage: Stage,
}

fn positive<T: Scalar>(name: &'static str, v: T) -> Result<()> {
    if v.is_finite() && v > T::zero() {
        Ok(())
    } else {
        Err(Error::ParamDomain {
            name,
            value: v.to_f64_lossy(),
            expected: "finite and > 0",
        })
    }
}

impl<T: Scalar> StageRooflineParams<T> {
    pub fn new(stage: Stage, ai: T, mem_bw: T, peak_flops: T, x_sat: T, alpha: T) -> Result<Self> {
        positive("ai", ai)?;
        positive("mem_bw", mem_bw)?;
        positive("peak_flops", peak_flops)?;
        positive("x_sat", x_sat)?;
        if !(alpha > T::zero() && alpha <= T::one()) {
            return Err(Error::ParamDomain {
                name: "alpha",
                value: alpha.to_f64_lossy(),
                expected: "0 < alpha <= 1",
            });
        }
        Ok(Self {
            ai,
            mem_bw,
            peak_flops,
            x_sat,
            alpha,
            stage,
        })
    }

    /// Illustrative preset for `stage` on an A10-class accelerator
    /// (600 GB/s, 125 TFLOP/s).
    pub fn preset(stage: Stage) -> Self {
        let (ai, x_sat, alpha) = match stage {
            Stage::Prefill => (200.0, 16.0, 0.9),
            Stage::Decode => (1.0, 64.0, 1.0),
            Stage::Ann => (1.0, 64.0, 1.0),
        };
        Self::new(
            stage,
            T::of(ai),
            T::of(6.0e11),
            T::of(1.25e14),
            T::of(x_sat),
            T::of(alpha),
        )
        .expect("presets are in domain")
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }
    pub fn ai(&self) -> T {
        self.ai
    }
    pub fn mem_bw(&self) -> T {
        self.mem_bw
    }
    pub fn peak_flops(&self) -> T {
        self.peak_flops
    }
    pub fn x_sat(&self) -> T {
        self.x_sat
    }
    pub fn alpha(&self) -> T {
        self.alpha
    }

    /// Plateau utilization: `min(1, ai * mem_bw / peak_flops)`.
    pub fn u_max(&self) -> T {
        let roof = self.ai * self.mem_bw / self.peak_flops;
        roof.min(T::one())
    }

    /// Utilization at batch/query count `x`. `utilization(0) == 0`.
    pub fn utilization(&self, x: T) -> Result<T> {
        if !(x >= T::zero()) || !x.is_finite() {
            return Err(Error::ParamDomain {
                name: "x",
                value: x.to_f64_lossy(),
                expected: "finite and >= 0",
            });
        }
        if x == T::zero() {
            return Ok(T::zero());
        }
        let rise = (x / self.x_sat).powf(self.alpha);
        Ok(rise.min(self.u_max()))
    }

    /// Smallest `x` at which the plateau is reached: `x_sat * u_max^(1/alpha)`.
    pub fn saturation_point(&self) -> T {
        self.x_sat * self.u_max().powf(T::one() / self.alpha)
    }

    pub fn sample_curve(&self, xs: &[T]) -> Result<UtilizationCurve<T>> {
        if xs.is_empty() {
            return Err(Error::input("sample points must be nonempty"));
        }
        if xs.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::input("sample points must be strictly increasing"));
        }
        let points = xs
            .iter()
            .map(|&x| self.utilization(x).map(|u| (x, u)))
            .collect::<Result<Vec<_>>>()?;
        Ok(UtilizationCurve {
            points,
            u_max: self.u_max(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtilizationCurve<T> {
    pub points: Vec<(T, T)>,
    pub u_max: T,
}

impl<T: Scalar> UtilizationCurve<T> {
    /// Renders the curve as `x,u` CSV preceded by a `# u_max=` comment line.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# u_max={}\nx,u\n", self.u_max);
        for (x, u) in &self.points {
            out.push_str(&format!("{x},{u}\n"));
        }
        out
    }
}

/// Parses either a comma list (`1,2,4`) or an inclusive range `a:b:step`.
pub fn parse_sample_points(spec: &str) -> Result<Vec<f64>> {
    let spec = spec.trim();
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::input(format!("range `{spec}` must be a:b:step")));
        }
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::input(format!("bad number `{s}` in range `{spec}`")))
        };
        let (a, b, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if !(step > 0.0) || !(b >= a) {
            return Err(Error::input(format!("range `{spec}` needs b >= a and step > 0")));
        }
        let n = ((b - a) / step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| a + step * i as f64).collect())
    } else {
        spec.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::input(format!("bad sample point `{s}`")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(ai: f64, mem_bw: f64, peak: f64, x_sat: f64, alpha: f64) -> StageRooflineParams<f64> {
        StageRooflineParams::new(Stage::Ann, ai, mem_bw, peak, x_sat, alpha).unwrap()
    }

    #[test]
    fn u_max_examples() {
        let p = params(1.0, 6.0e11, 1.25e14, 64.0, 1.0);
        assert!((p.u_max() - 4.8e-3).abs() <= 4.8e-3 * 1e-15);
        assert_eq!(params(1000.0, 1e12, 1e14, 1.0, 1.0).u_max(), 1.0);
        assert_eq!(params(100.0, 1e12, 1e14, 1.0, 1.0).u_max(), 1.0);
    }

    #[test]
    fn rejects_out_of_domain() {
        assert!(StageRooflineParams::new(Stage::Decode, 0.0, 1.0, 1.0, 1.0, 1.0).is_err());
        assert!(StageRooflineParams::new(Stage::Decode, 1.0, -1.0, 1.0, 1.0, 1.0).is_err());
        assert!(StageRooflineParams::new(Stage::Decode, 1.0, 1.0, 1.0, 1.0, 0.0).is_err());
        assert!(StageRooflineParams::new(Stage::Decode, 1.0, 1.0, 1.0, 1.0, 1.5).is_err());
        let p = params(1.0, 1.0, 1.0, 1.0, 1.0);
        assert!(matches!(
            p.utilization(-1.0),
            Err(Error::ParamDomain { name: "x", .. })
        ));
    }

    #[test]
    fn utilization_examples() {
        let p = params(10.0, 1.0, 1.0, 100.0, 1.0);
        assert_eq!(p.utilization(50.0).unwrap(), 0.5);
        assert_eq!(p.utilization(0.0).unwrap(), 0.0);
        let q = params(10.0, 1.0, 1.0, 100.0, 0.37);
        assert_eq!(q.utilization(100.0).unwrap(), 1.0);
        let r = params(10.0, 1.0, 1.0, 100.0, 0.5);
        assert_eq!(r.utilization(400.0).unwrap(), 1.0);
    }

    #[test]
    fn saturation_point_examples() {
        assert_eq!(params(5.0, 1.0, 1.0, 37.0, 0.6).saturation_point(), 37.0);
        // u_max = 0.25
        let lin = params(0.25, 1.0, 1.0, 100.0, 1.0);
        assert!((lin.saturation_point() - 25.0).abs() <= 25.0 * 1e-12);
        let sq = params(0.25, 1.0, 1.0, 100.0, 0.5);
        assert!((sq.saturation_point() - 6.25).abs() <= 6.25 * 1e-12);
    }

    #[test]
    fn sample_curve_shapes() {
        let p = params(0.5, 1.0, 1.0, 10.0, 1.0);
        let c = p.sample_curve(&[0.0]).unwrap();
        assert_eq!(c.points, vec![(0.0, 0.0)]);
        let full = params(5.0, 1.0, 1.0, 10.0, 1.0);
        assert_eq!(full.sample_curve(&[10.0]).unwrap().points, vec![(10.0, 1.0)]);

        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        let c = p.sample_curve(&xs).unwrap();
        assert!(c.points.windows(2).all(|w| w[0].1 <= w[1].1));
        assert_eq!(c.points.last().unwrap().1, 0.5);
        assert!(p.sample_curve(&[2.0, 1.0]).is_err());
        assert!(p.sample_curve(&[-1.0, 1.0]).is_err());
        assert!(p.sample_curve(&[]).is_err());
    }

    #[test]
    fn stage_plateaus() {
        let pre = StageRooflineParams::<f64>::preset(Stage::Prefill);
        let dec = StageRooflineParams::<f64>::preset(Stage::Decode);
        let ann = StageRooflineParams::<f64>::preset(Stage::Ann);
        assert!((pre.u_max() - 200.0 * 6.0e11 / 1.25e14).abs() < 1e-15);
        assert!(pre.u_max() > 100.0 * dec.u_max());
        assert_eq!(dec.u_max(), ann.u_max());
        assert!(dec.u_max() < 1.0);
    }

    #[test]
    fn parses_sample_points() {
        assert_eq!(parse_sample_points("1,2, 4").unwrap(), vec![1.0, 2.0, 4.0]);
        assert_eq!(parse_sample_points("1:4:1").unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(parse_sample_points("0:1:0.5").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_sample_points("1:2").is_err());
        assert!(parse_sample_points("a,b").is_err());
    }

    #[test]
    fn generic_over_f32() {
        let p = StageRooflineParams::<f32>::new(Stage::Decode, 1.0, 6.0e11, 1.25e14, 64.0, 1.0).unwrap();
        assert!((p.u_max() - 4.8e-3).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn monotone_and_clamped(
            ai in 0.01f64..1e3, bw in 1e9f64..1e13, peak in 1e11f64..1e15,
            x_sat in 0.5f64..1e4, alpha in 0.05f64..=1.0,
            a in 0.0f64..1e5, b in 0.0f64..1e5,
        ) {
            let p = params(ai, bw, peak, x_sat, alpha);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (ul, uh) = (p.utilization(lo).unwrap(), p.utilization(hi).unwrap());
            prop_assert!(ul <= uh);
            prop_assert!(0.0 <= ul && uh <= p.u_max() && p.u_max() <= 1.0);
        }

        #[test]
        fn plateau_reached_at_saturation_point(
            ai in 0.01f64..1e3, bw in 1e9f64..1e13, peak in 1e11f64..1e15,
            x_sat in 0.5f64..1e4, alpha in 0.05f64..=1.0,
        ) {
            let p = params(ai, bw, peak, x_sat, alpha);
            let s = p.saturation_point();
            let u = p.utilization(s).unwrap();
            prop_assert!((u - p.u_max()).abs() <= p.u_max() * 1e-12);
            if p.u_max() > 1e-300 {
                prop_assert!(p.utilization(s * (1.0 - 1e-6)).unwrap() < p.u_max());
            }
        }
    }
}
