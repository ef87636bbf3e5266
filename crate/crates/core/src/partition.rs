//! Component layout of the flat parameter vector and per-component sync
//! schedules.

use std::ops::{Deref, DerefMut, Range};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One contiguous slice of the parameter vector with its own sync period.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub offset: usize,
    pub length: usize,
    pub sync_period: u64,
}

impl Component {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.length
    }
}

/// Ordered, gap-free partition of `[0, d)` into components.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Component>", into = "Vec<Component>")]
pub struct ComponentLayout {
    components: Vec<Component>,
    dim: usize,
}

impl ComponentLayout {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::config("layout must have at least one component"));
        }
        let mut next = 0;
        for c in &components {
            if c.length == 0 {
                return Err(Error::config(format!("component '{}' has zero length", c.name)));
            }
            if c.sync_period == 0 {
                return Err(Error::config(format!(
                    "component '{}' has sync period 0 (must be >= 1)",
                    c.name
                )));
            }
            if c.offset != next {
                return Err(Error::config(format!(
                    "component '{}' starts at {} but the previous one ends at {next}",
                    c.name, c.offset
                )));
            }
            next += c.length;
        }
        Ok(Self {
            components,
            dim: next,
        })
    }

    /// Builds a contiguous layout from `(name, length, sync_period)` triples.
    pub fn from_lengths<S: Into<String>>(parts: impl IntoIterator<Item = (S, usize, u64)>) -> Result<Self> {
        let mut offset = 0;
        let components = parts
            .into_iter()
            .map(|(name, length, sync_period)| {
                let c = Component {
                    name: name.into(),
                    offset,
                    length,
                    sync_period,
                };
                offset += length;
                c
            })
            .collect();
        Self::new(components)
    }

    /// Splits `dim` as evenly as possible into one component per period.
    /// Earlier components absorb the remainder.
    pub fn even_split(dim: usize, periods: &[u64]) -> Result<Self> {
        let m = periods.len();
        if m == 0 || dim < m {
            return Err(Error::config(format!(
                "cannot split dimension {dim} into {m} non-empty components"
            )));
        }
        let (base, extra) = (dim / m, dim % m);
        Self::from_lengths(
            periods
                .iter()
                .enumerate()
                .map(|(i, &h)| (format!("c{i}"), base + usize::from(i < extra), h)),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn component(&self, i: usize) -> Result<&Component> {
        self.components.get(i).ok_or_else(|| {
            Error::arg(format!(
                "component {i} out of range for a layout of {}",
                self.components.len()
            ))
        })
    }

    pub fn view<'a>(&self, vec: &'a [f64], i: usize) -> Result<&'a [f64]> {
        let r = self.component(i)?.range();
        vec.get(r)
            .ok_or_else(|| Error::arg("vector is shorter than the layout"))
    }

    pub fn view_mut<'a>(&self, vec: &'a mut [f64], i: usize) -> Result<&'a mut [f64]> {
        let r = self.component(i)?.range();
        vec.get_mut(r)
            .ok_or_else(|| Error::arg("vector is shorter than the layout"))
    }

    /// Components whose period divides `t`. Steps are 1-based.
    pub fn due_components(&self, t: u64) -> Vec<usize> {
        self.components
            .iter()
            .enumerate()
            .filter(|(_, c)| t.is_multiple_of(c.sync_period))
            .map(|(i, _)| i)
            .collect()
    }
}

impl TryFrom<Vec<Component>> for ComponentLayout {
    type Error = Error;

    fn try_from(components: Vec<Component>) -> Result<Self> {
        Self::new(components)
    }
}

impl From<ComponentLayout> for Vec<Component> {
    fn from(layout: ComponentLayout) -> Self {
        layout.components
    }
}

/// Flat real-valued parameter vector. Also used for the ω, Δ, G and anchor
/// slots of a worker.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn sq_dist(&self, other: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

impl From<Vec<f64>> for ParameterVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for ParameterVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParameterVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ab() -> ComponentLayout {
        ComponentLayout::from_lengths([("a", 3, 1), ("b", 2, 1)]).unwrap()
    }

    #[test]
    fn views_follow_offsets() {
        let layout = ab();
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(layout.view(&v, 1).unwrap(), &[4.0, 5.0]);
        assert!(layout.view(&v, 2).is_err());

        let single = ComponentLayout::from_lengths([("all", 5, 8)]).unwrap();
        assert_eq!(single.view(&v, 0).unwrap(), &v);
    }

    #[test]
    fn mutable_view_aliases_vector() {
        let layout = ab();
        let mut v = ParameterVector::from(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        layout.view_mut(&mut v, 1).unwrap()[0] = -4.0;
        assert_eq!(&*v, &[1.0, 2.0, 3.0, -4.0, 5.0]);
    }

    #[test]
    fn due_components_follow_periods() {
        let layout = ComponentLayout::from_lengths([("dense", 4, 16), ("embed", 4, 128)]).unwrap();
        assert_eq!(layout.due_components(128), vec![0, 1]);
        assert_eq!(layout.due_components(16), vec![0]);
        let single = ComponentLayout::from_lengths([("all", 4, 8)]).unwrap();
        assert!(single.due_components(5).is_empty());
    }

    #[test]
    fn malformed_layouts_are_rejected() {
        assert!(ComponentLayout::new(vec![]).is_err());
        assert!(ComponentLayout::from_lengths([("a", 0, 1)]).is_err());
        assert!(ComponentLayout::from_lengths([("a", 2, 0)]).is_err());
        let gap = vec![
            Component { name: "a".into(), offset: 0, length: 2, sync_period: 1 },
            Component { name: "b".into(), offset: 3, length: 2, sync_period: 1 },
        ];
        assert!(ComponentLayout::new(gap).is_err());
        assert!(ComponentLayout::even_split(1, &[8, 16]).is_err());
    }

    #[test]
    fn even_split_covers_dimension() {
        let layout = ComponentLayout::even_split(11, &[16, 128, 4]).unwrap();
        let lens: Vec<_> = layout.components().iter().map(|c| c.length).collect();
        assert_eq!(lens, vec![4, 4, 3]);
        assert_eq!(layout.dim(), 11);
    }

    #[test]
    fn serde_rejects_overlap() {
        let json = r#"[{"name":"a","offset":0,"length":3,"sync_period":1},
                       {"name":"b","offset":2,"length":2,"sync_period":1}]"#;
        assert!(serde_json::from_str::<ComponentLayout>(json).is_err());
    }

    proptest! {
        #[test]
        fn concatenated_views_rebuild_vector(
            lens in prop::collection::vec(1usize..6, 1..6),
            seed in any::<u64>(),
        ) {
            let layout = ComponentLayout::from_lengths(
                lens.iter().enumerate().map(|(i, &l)| (format!("c{i}"), l, 1)),
            ).unwrap();
            let v: Vec<f64> = (0..layout.dim())
                .map(|j| f64::from_bits(seed.rotate_left(j as u32) >> 2))
                .collect();
            let rebuilt: Vec<f64> = (0..layout.len())
                .flat_map(|i| layout.view(&v, i).unwrap().to_vec())
                .collect();
            prop_assert_eq!(
                rebuilt.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }

        #[test]
        fn sync_events_land_on_period_multiples(h in 1u64..40, t in 1u64..2000) {
            let layout = ComponentLayout::from_lengths([("a", 2, h), ("b", 3, h)]).unwrap();
            let due = layout.due_components(t);
            if t % h == 0 {
                prop_assert_eq!(due, vec![0, 1]);
            } else {
                prop_assert!(due.is_empty());
            }
            let every = ComponentLayout::from_lengths([("a", 2, 1), ("b", 3, 1)]).unwrap();
            prop_assert_eq!(every.due_components(t), vec![0, 1]);
        }
    }
}
