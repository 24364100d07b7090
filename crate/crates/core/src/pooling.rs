//! Nested invariance pooling.
//!
//! Each step collapses one transformation-group axis of an orbit with a
//! power mean `(1/m * sum v^n)^(1/n)` of its `m` samples; `n = 1` is average
//! pooling, `n = 2` the root mean square and `n = inf` the max. Chaining steps
//! over rotation, scale and translation yields a descriptor invariant to all
//! three groups.

use std::fmt;
use std::str::FromStr;

use crate::descriptor::Descriptor;
use crate::error::{NipError, Result};
use crate::store::OrbitTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolOrder {
    Finite(u32),
    Infinity,
}

impl PoolOrder {
    pub const AVERAGE: PoolOrder = PoolOrder::Finite(1);
    pub const RMS: PoolOrder = PoolOrder::Finite(2);
    pub const MAX: PoolOrder = PoolOrder::Infinity;

    pub fn finite(n: u32) -> Result<Self> {
        if n == 0 {
            return Err(NipError::Domain("moment order must be >= 1".into()));
        }
        Ok(PoolOrder::Finite(n))
    }

    fn letter(&self) -> Option<char> {
        match self {
            PoolOrder::Finite(1) => Some('A'),
            PoolOrder::Finite(2) => Some('S'),
            PoolOrder::Infinity => Some('M'),
            PoolOrder::Finite(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupAxis {
    Rotation,
    Scale,
    /// Both spatial dimensions of the feature map, pooled jointly.
    Translation,
}

impl GroupAxis {
    fn letter(&self) -> char {
        match self {
            GroupAxis::Rotation => 'R',
            GroupAxis::Scale => 'S',
            GroupAxis::Translation => 'T',
        }
    }
}

impl fmt::Display for GroupAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            GroupAxis::Rotation => "rotation",
            GroupAxis::Scale => "scale",
            GroupAxis::Translation => "translation",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolStep {
    pub axis: GroupAxis,
    pub order: PoolOrder,
}

/// Ordered pooling recipe such as `A_S,S_T,M_R`, applied left to right.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolSequence {
    steps: Vec<PoolStep>,
}

impl PoolSequence {
    pub fn new(steps: Vec<PoolStep>) -> Result<Self> {
        if steps.is_empty() {
            return Err(NipError::parse(1, "empty pooling sequence"));
        }
        for (i, s) in steps.iter().enumerate() {
            if steps[..i].iter().any(|p| p.axis == s.axis) {
                return Err(NipError::parse(1, format!("axis {} pooled twice", s.axis)));
            }
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[PoolStep] {
        &self.steps
    }
}

pub fn parse_sequence(s: &str) -> Result<PoolSequence> {
    let mut steps = Vec::new();
    for token in s.split(',') {
        let token = token.trim();
        let (m, a) = token
            .split_once('_')
            .ok_or_else(|| NipError::parse(1, format!("bad pooling token {token:?}")))?;
        let order = match m {
            "A" => PoolOrder::AVERAGE,
            "S" => PoolOrder::RMS,
            "M" => PoolOrder::MAX,
            _ => match m.strip_prefix('P').and_then(|n| n.parse::<u32>().ok()) {
                Some(n) if n >= 1 => PoolOrder::Finite(n),
                _ => {
                    return Err(NipError::parse(
                        1,
                        format!("unknown moment {m:?} in {token:?}"),
                    ))
                }
            },
        };
        let axis = match a {
            "R" => GroupAxis::Rotation,
            "S" => GroupAxis::Scale,
            "T" => GroupAxis::Translation,
            _ => {
                return Err(NipError::parse(
                    1,
                    format!("unknown axis {a:?} in {token:?}"),
                ))
            }
        };
        steps.push(PoolStep { axis, order });
    }
    PoolSequence::new(steps)
}

impl FromStr for PoolSequence {
    type Err = NipError;

    fn from_str(s: &str) -> Result<Self> {
        parse_sequence(s)
    }
}

impl fmt::Display for PoolSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            match s.order.letter() {
                Some(c) => write!(f, "{c}_{}", s.axis.letter())?,
                None => match s.order {
                    PoolOrder::Finite(n) => write!(f, "P{n}_{}", s.axis.letter())?,
                    PoolOrder::Infinity => unreachable!(),
                },
            }
        }
        Ok(())
    }
}

/// Power mean of non-negative samples; `Infinity` is the exact max.
pub fn moment_pool(values: &[f64], order: PoolOrder) -> Result<f64> {
    let mut buf = values.to_vec();
    moment_pool_in_place(&mut buf, order)
}

/// Same as [`moment_pool`] but reorders `buf`. Samples are sorted before the
/// reduction, so the result does not depend on their order at all.
pub(crate) fn moment_pool_in_place(buf: &mut [f64], order: PoolOrder) -> Result<f64> {
    if buf.is_empty() {
        return Err(NipError::EmptyOrbit);
    }
    if let Some(v) = buf.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(NipError::Domain(format!(
            "pooled sample {v} is not a finite non-negative number"
        )));
    }
    buf.sort_unstable_by(f64::total_cmp);
    let min = buf[0];
    let max = buf[buf.len() - 1];
    let n = match order {
        PoolOrder::Infinity => return Ok(max),
        PoolOrder::Finite(0) => return Err(NipError::Domain("moment order must be >= 1".into())),
        PoolOrder::Finite(n) => n,
    };
    if max == 0.0 {
        return Ok(0.0);
    }
    let m = buf.len() as f64;
    let value = if n == 1 {
        buf.iter().sum::<f64>() / m
    } else {
        // factor out the max so v^n cannot overflow
        let mean = if n <= i32::MAX as u32 {
            buf.iter().map(|v| (v / max).powi(n as i32)).sum::<f64>() / m
        } else {
            buf.iter().map(|v| (v / max).powf(n as f64)).sum::<f64>() / m
        };
        max * mean.powf(1.0 / n as f64)
    };
    Ok(value.clamp(min, max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AxisLabel {
    Rotation,
    Scale,
    Channel,
    Row,
    Col,
}

/// An orbit tensor with some group axes already pooled away.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolTensor {
    axes: Vec<(AxisLabel, usize)>,
    data: Vec<f64>,
}

impl PoolTensor {
    pub fn from_orbit(t: &OrbitTensor) -> Self {
        let s = t.shape();
        Self {
            axes: vec![
                (AxisLabel::Rotation, s.n_rot),
                (AxisLabel::Scale, s.n_scale),
                (AxisLabel::Channel, s.channels),
                (AxisLabel::Row, s.height),
                (AxisLabel::Col, s.width),
            ],
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.1).collect()
    }

    pub fn labels(&self) -> Vec<AxisLabel> {
        self.axes.iter().map(|a| a.0).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn position(&self, label: AxisLabel) -> Option<usize> {
        self.axes.iter().position(|a| a.0 == label)
    }

    /// Contiguous axis range covered by a group axis.
    fn group_span(&self, axis: GroupAxis) -> Option<(usize, usize)> {
        match axis {
            GroupAxis::Rotation => self.position(AxisLabel::Rotation).map(|p| (p, p + 1)),
            GroupAxis::Scale => self.position(AxisLabel::Scale).map(|p| (p, p + 1)),
            GroupAxis::Translation => {
                let r = self.position(AxisLabel::Row)?;
                let c = self.position(AxisLabel::Col)?;
                debug_assert_eq!(c, r + 1);
                Some((r, c + 1))
            }
        }
    }

    /// Collapses `axis` with a moment of the given order.
    pub fn pool_axis(&self, axis: GroupAxis, order: PoolOrder) -> Result<PoolTensor> {
        let (start, end) = self
            .group_span(axis)
            .ok_or_else(|| NipError::AxisReused(axis.to_string()))?;
        let outer: usize = self.axes[..start].iter().map(|a| a.1).product();
        let m: usize = self.axes[start..end].iter().map(|a| a.1).product();
        let inner: usize = self.axes[end..].iter().map(|a| a.1).product();

        let mut out = Vec::with_capacity(outer * inner);
        let mut buf = vec![0.0; m];
        for o in 0..outer {
            for i in 0..inner {
                for (s, slot) in buf.iter_mut().enumerate() {
                    *slot = self.data[(o * m + s) * inner + i];
                }
                out.push(moment_pool_in_place(&mut buf, order)?);
            }
        }
        let mut axes = self.axes.clone();
        axes.drain(start..end);
        Ok(PoolTensor { axes, data: out })
    }

    /// Flattens with the channel axis outermost and the remaining axes in
    /// their original order.
    pub fn flatten_channel_major(&self) -> Vec<f64> {
        let Some(cpos) = self.position(AxisLabel::Channel) else {
            return self.data.clone();
        };
        let dims = self.shape();
        let channels = dims[cpos];
        let outer: usize = dims[..cpos].iter().product();
        let inner: usize = dims[cpos + 1..].iter().product();
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..channels {
            for o in 0..outer {
                let base = (o * channels + c) * inner;
                out.extend_from_slice(&self.data[base..base + inner]);
            }
        }
        out
    }
}

/// Applies every step of `seq` in order and flattens what is left.
pub fn nip_descriptor(t: &OrbitTensor, seq: &PoolSequence) -> Result<Descriptor> {
    let mut cur = PoolTensor::from_orbit(t);
    for step in seq.steps() {
        cur = cur.pool_axis(step.axis, step.order)?;
    }
    Descriptor::new(
        t.image_id.clone(),
        seq.to_string(),
        cur.flatten_channel_major(),
    )
}

/// Output dimension of `seq` on an orbit of the given shape.
pub fn descriptor_dim(shape: crate::store::OrbitShape, seq: &PoolSequence) -> usize {
    let mut dim = shape.channels;
    let pooled = |a: GroupAxis| seq.steps().iter().any(|s| s.axis == a);
    if !pooled(GroupAxis::Rotation) {
        dim *= shape.n_rot;
    }
    if !pooled(GroupAxis::Scale) {
        dim *= shape.n_scale;
    }
    if !pooled(GroupAxis::Translation) {
        dim *= shape.height * shape.width;
    }
    dim
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::OrbitShape;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn constant_orbit_average() {
        assert_eq!(
            moment_pool(&[2.0, 2.0, 2.0], PoolOrder::AVERAGE).unwrap(),
            2.0
        );
    }

    #[test]
    fn max_pool() {
        assert_eq!(moment_pool(&[1.0, 5.0, 2.0], PoolOrder::MAX).unwrap(), 5.0);
    }

    #[test]
    fn rms_of_three_four() {
        // sqrt((9 + 16) / 2)
        let v = moment_pool(&[3.0, 4.0], PoolOrder::RMS).unwrap();
        assert!((v - 3.535_533_905_932_737_6).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            moment_pool(&[], PoolOrder::AVERAGE),
            Err(NipError::EmptyOrbit)
        ));
        assert!(matches!(
            moment_pool(&[1.0, -1.0], PoolOrder::AVERAGE),
            Err(NipError::Domain(_))
        ));
        assert!(matches!(
            moment_pool(&[f64::NAN], PoolOrder::MAX),
            Err(NipError::Domain(_))
        ));
        assert!(PoolOrder::finite(0).is_err());
    }

    #[test]
    fn large_order_does_not_overflow() {
        let v = moment_pool(&[1e300, 5e299], PoolOrder::Finite(50)).unwrap();
        assert!(v.is_finite());
        assert!((5e299..=1e300).contains(&v));
        assert_eq!(moment_pool(&[0.0, 0.0], PoolOrder::Finite(7)).unwrap(), 0.0);
    }

    #[test]
    fn parse_best_sequence() {
        let seq = parse_sequence("A_S,S_T,M_R").unwrap();
        assert_eq!(
            seq.steps(),
            &[
                PoolStep {
                    axis: GroupAxis::Scale,
                    order: PoolOrder::Finite(1)
                },
                PoolStep {
                    axis: GroupAxis::Translation,
                    order: PoolOrder::Finite(2)
                },
                PoolStep {
                    axis: GroupAxis::Rotation,
                    order: PoolOrder::Infinity
                },
            ]
        );
        assert_eq!(seq.to_string(), "A_S,S_T,M_R");
    }

    #[test]
    fn parse_single_and_errors() {
        let seq = parse_sequence("A_T").unwrap();
        assert_eq!(
            seq.steps(),
            &[PoolStep {
                axis: GroupAxis::Translation,
                order: PoolOrder::AVERAGE
            }]
        );
        assert!(matches!(
            parse_sequence("A_T,A_T"),
            Err(NipError::Parse { .. })
        ));
        assert!(matches!(
            parse_sequence("A_T,M_T"),
            Err(NipError::Parse { .. })
        ));
        assert!(matches!(parse_sequence("X_T"), Err(NipError::Parse { .. })));
        assert!(matches!(parse_sequence("A_Q"), Err(NipError::Parse { .. })));
        assert!(matches!(parse_sequence(""), Err(NipError::Parse { .. })));
        assert!(matches!(
            parse_sequence("P0_T"),
            Err(NipError::Parse { .. })
        ));
        let p3 = parse_sequence("P3_T,S_R").unwrap();
        assert_eq!(p3.steps()[0].order, PoolOrder::Finite(3));
        assert_eq!(p3.to_string(), "P3_T,S_R");
    }

    #[test]
    fn translation_pool_drops_both_spatial_axes() {
        let t = OrbitTensor::filled("x", OrbitShape::new(3, 2, 4, 7, 7), 1.0).unwrap();
        let p = PoolTensor::from_orbit(&t)
            .pool_axis(GroupAxis::Translation, PoolOrder::RMS)
            .unwrap();
        assert_eq!(p.shape(), vec![3, 2, 4]);
        assert!(matches!(
            p.pool_axis(GroupAxis::Translation, PoolOrder::MAX),
            Err(NipError::AxisReused(_))
        ));
    }

    #[test]
    fn vgg_pool5_translation_shape() {
        let shape = OrbitShape::vgg_pool5();
        let t = OrbitTensor::filled("x", shape, 0.25).unwrap();
        let p = PoolTensor::from_orbit(&t)
            .pool_axis(GroupAxis::Translation, PoolOrder::AVERAGE)
            .unwrap();
        assert_eq!(p.shape(), vec![36, 10, 512]);
        let d = nip_descriptor(&t, &parse_sequence("A_S,S_T,M_R").unwrap()).unwrap();
        assert_eq!(d.dim(), 512);
        assert!(d.values.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn singleton_axis_is_identity() {
        let t = OrbitTensor::new("x", OrbitShape::new(1, 1, 2, 1, 1), vec![0.3, 7.0]).unwrap();
        let p = PoolTensor::from_orbit(&t)
            .pool_axis(GroupAxis::Rotation, PoolOrder::AVERAGE)
            .unwrap();
        assert_eq!(p.data(), &[0.3f32 as f64, 7.0]);
    }

    #[test]
    fn max_along_rotation() {
        let t = OrbitTensor::new("x", OrbitShape::new(2, 1, 1, 1, 1), vec![1.0, 5.0]).unwrap();
        let p = PoolTensor::from_orbit(&t)
            .pool_axis(GroupAxis::Rotation, PoolOrder::MAX)
            .unwrap();
        assert_eq!(p.data(), &[5.0]);
    }

    #[test]
    fn two_sample_rotation_descriptor() {
        let t = OrbitTensor::new("x", OrbitShape::new(2, 1, 1, 1, 1), vec![0.0, 4.0]).unwrap();
        let a = nip_descriptor(&t, &parse_sequence("A_R").unwrap()).unwrap();
        let m = nip_descriptor(&t, &parse_sequence("M_R").unwrap()).unwrap();
        assert_eq!(a.values, vec![2.0]);
        assert_eq!(m.values, vec![4.0]);
    }

    #[test]
    fn non_commuting_witness() {
        // rotation x scale = [[0,2],[2,0]], single channel and cell
        let t = OrbitTensor::new(
            "w",
            OrbitShape::new(2, 2, 1, 1, 1),
            vec![0.0, 2.0, 2.0, 0.0],
        )
        .unwrap();
        let a_then_m = nip_descriptor(&t, &parse_sequence("A_R,M_S").unwrap()).unwrap();
        let m_then_a = nip_descriptor(&t, &parse_sequence("M_R,A_S").unwrap()).unwrap();
        assert_eq!(a_then_m.values, vec![1.0]);
        assert_eq!(m_then_a.values, vec![2.0]);
    }

    #[test]
    fn partial_sequence_flattens_channel_major() {
        // [rot=2][scale=1][C=2][1][1]: values r0c0=1 r0c1=2 r1c0=3 r1c1=4
        let t = OrbitTensor::new(
            "x",
            OrbitShape::new(2, 1, 2, 1, 1),
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let d = nip_descriptor(&t, &parse_sequence("A_S,A_T").unwrap()).unwrap();
        assert_eq!(d.values, vec![1.0, 3.0, 2.0, 4.0]);
        assert_eq!(
            descriptor_dim(t.shape(), &parse_sequence("A_S,A_T").unwrap()),
            4
        );
        assert_eq!(
            descriptor_dim(
                OrbitShape::new(1, 1, 512, 7, 7),
                &parse_sequence("A_R").unwrap()
            ),
            25088
        );
    }

    proptest! {
        #[test]
        fn power_mean_is_monotone_and_bounded(v in prop::collection::vec(0.0f64..100.0, 1..40)) {
            let a = moment_pool(&v, PoolOrder::AVERAGE).unwrap();
            let s = moment_pool(&v, PoolOrder::RMS).unwrap();
            let p3 = moment_pool(&v, PoolOrder::Finite(3)).unwrap();
            let m = moment_pool(&v, PoolOrder::MAX).unwrap();
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!(a <= s && s <= p3 && p3 <= m);
            prop_assert!(lo <= a && m <= v.iter().cloned().fold(0.0, f64::max));
        }

        #[test]
        fn homogeneous(v in prop::collection::vec(0.0f64..10.0, 1..20), alpha in 0.0f64..50.0, n in 1u32..6) {
            let scaled: Vec<f64> = v.iter().map(|x| alpha * x).collect();
            for order in [PoolOrder::Finite(n), PoolOrder::Infinity] {
                let lhs = moment_pool(&scaled, order).unwrap();
                let rhs = alpha * moment_pool(&v, order).unwrap();
                prop_assert!(close(lhs, rhs, 1e-12) || (lhs - rhs).abs() < 1e-12);
            }
        }

        #[test]
        fn sample_order_is_irrelevant(mut v in prop::collection::vec(0.0f64..10.0, 1..30), n in 1u32..5) {
            let before = moment_pool(&v, PoolOrder::Finite(n)).unwrap();
            v.reverse();
            let half = v.len() / 2;
            v.rotate_left(half);
            prop_assert_eq!(before, moment_pool(&v, PoolOrder::Finite(n)).unwrap());
        }
    }
}
