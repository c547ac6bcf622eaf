//! Three-site hexagonal layout with toroidal wrap-around.
//!
//! Sites sit on a hexagonal lattice with spacing `isd`. The three cells are
//! the three cosets of the index-3 sublattice spanned by
//! `isd * (3/2, sqrt(3)/2)` and `isd * (0, sqrt(3))`, so the pattern repeats
//! and every UE sees the nearest image of each BS.

#[derive(Debug, Clone, Copy)]
pub struct HexWrapAround {
    isd: f64,
}

impl HexWrapAround {
    pub fn new(isd: f64) -> Self {
        Self { isd }
    }

    pub fn site(&self, cell: usize) -> [f64; 2] {
        match cell {
            0 => [0.0, 0.0],
            1 => [self.isd, 0.0],
            _ => [-self.isd, 0.0],
        }
    }

    fn periods(&self) -> ([f64; 2], [f64; 2]) {
        let h = 3f64.sqrt();
        ([1.5 * self.isd, 0.5 * h * self.isd], [0.0, h * self.isd])
    }

    /// Wrap-around distance from `pos` to the nearest image of site `cell`.
    pub fn distance(&self, pos: [f64; 2], cell: usize) -> f64 {
        let s = self.site(cell);
        let (p1, p2) = self.periods();
        let mut best = f64::INFINITY;
        for m in -2i32..=2 {
            for n in -2i32..=2 {
                let x = s[0] + m as f64 * p1[0] + n as f64 * p2[0];
                let y = s[1] + m as f64 * p1[1] + n as f64 * p2[1];
                let d = ((pos[0] - x).powi(2) + (pos[1] - y).powi(2)).sqrt();
                best = best.min(d);
            }
        }
        best
    }
}
