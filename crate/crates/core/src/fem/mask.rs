//! Observation regions: the whole domain or a union of disjoint rectangles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::StructuredGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Result<Self> {
        if !(x0 < x1 && y0 < y1) || ![x0, x1, y0, y1].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!(
                "degenerate rectangle [{x0}, {x1}] x [{y0}, {y1}]"
            )));
        }
        Ok(Self { x0, x1, y0, y1 })
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }

    /// Intersection with positive area, if any.
    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x0.max(other.x0);
        let x1 = self.x1.min(other.x1);
        let y0 = self.y0.max(other.y0);
        let y1 = self.y1.min(other.y1);
        (x0 < x1 && y0 < y1).then_some(Rect { x0, x1, y0, y1 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MeasurementMask {
    Full,
    Patches { patches: Vec<Rect> },
}

impl MeasurementMask {
    /// Union of pairwise disjoint rectangles inside the grid's domain.
    pub fn patches(patches: Vec<Rect>, grid: &StructuredGrid) -> Result<Self> {
        if patches.is_empty() {
            return Err(Error::invalid("measurement region is empty"));
        }
        let domain = Rect::new(0.0, grid.lx(), 0.0, grid.ly())?;
        for (k, p) in patches.iter().enumerate() {
            if p.x0 < domain.x0 || p.x1 > domain.x1 || p.y0 < domain.y0 || p.y1 > domain.y1 {
                return Err(Error::invalid(format!("sensor patch {k} leaves the domain")));
            }
            for q in &patches[..k] {
                if p.intersection(q).is_some() {
                    return Err(Error::invalid(format!("sensor patch {k} overlaps another patch")));
                }
            }
        }
        Ok(Self::Patches { patches })
    }

    pub fn is_full(&self) -> bool {
        matches!(self, Self::Full)
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        match self {
            Self::Full => true,
            Self::Patches { patches } => patches.iter().any(|r| r.contains(p)),
        }
    }

    pub fn area(&self, grid: &StructuredGrid) -> f64 {
        match self {
            Self::Full => grid.area(),
            Self::Patches { patches } => patches.iter().map(Rect::area).sum(),
        }
    }
}
