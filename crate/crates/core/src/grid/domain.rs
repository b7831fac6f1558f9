use crate::error::{Error, Result};

/// Which branch of the boundary case analysis a pixel falls into.
///
/// The four boundary parts each own exactly one corner: the left part owns
/// `(0, 0)`, top owns `(0, N2-1)`, right owns `(N1-1, N2-1)` and bottom owns
/// `(N1-1, 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PixelClass {
    Interior,
    /// `i1 = 0, i2 = 0`
    LeftCorner,
    /// `i1 = 0, 0 < i2 < N2-1`
    LeftEdge,
    /// `i1 = 0, i2 = N2-1`
    TopCorner,
    /// `0 < i1 < N1-1, i2 = N2-1`
    TopEdge,
    /// `i1 = N1-1, i2 = N2-1`
    RightCorner,
    /// `i1 = N1-1, 0 < i2 < N2-1`
    RightEdge,
    /// `i1 = N1-1, i2 = 0`
    BottomCorner,
    /// `0 < i1 < N1-1, i2 = 0`
    BottomEdge,
}

impl PixelClass {
    #[inline]
    pub fn of(i1: usize, i2: usize, n1: usize, n2: usize) -> PixelClass {
        let last1 = n1 - 1;
        let last2 = n2 - 1;
        if i1 >= 1 && i1 < last1 && i2 >= 1 && i2 < last2 {
            PixelClass::Interior
        } else if i1 == 0 && i2 < last2 {
            if i2 == 0 {
                PixelClass::LeftCorner
            } else {
                PixelClass::LeftEdge
            }
        } else if i2 == last2 && i1 < last1 {
            if i1 == 0 {
                PixelClass::TopCorner
            } else {
                PixelClass::TopEdge
            }
        } else if i1 == last1 && i2 >= 1 {
            if i2 == last2 {
                PixelClass::RightCorner
            } else {
                PixelClass::RightEdge
            }
        } else if i1 == last1 {
            PixelClass::BottomCorner
        } else {
            PixelClass::BottomEdge
        }
    }

    pub fn is_corner(self) -> bool {
        matches!(
            self,
            PixelClass::LeftCorner
                | PixelClass::TopCorner
                | PixelClass::RightCorner
                | PixelClass::BottomCorner
        )
    }
}

/// Partition of the pixel index set into interior and four boundary parts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DomainDecomposition {
    pub interior: Vec<(usize, usize)>,
    pub left: Vec<(usize, usize)>,
    pub top: Vec<(usize, usize)>,
    pub right: Vec<(usize, usize)>,
    pub bottom: Vec<(usize, usize)>,
}

impl DomainDecomposition {
    pub fn total(&self) -> usize {
        self.interior.len() + self.left.len() + self.top.len() + self.right.len() + self.bottom.len()
    }
}

/// Splits an `height × width` grid into
///
/// ```text
/// interior = {1..N1-2} × {1..N2-2}
/// left     = {0}       × {0..N2-2}
/// top      = {0..N1-2} × {N2-1}
/// right    = {N1-1}    × {1..N2-1}
/// bottom   = {1..N1-1} × {0}
/// ```
pub fn decompose_domain(height: usize, width: usize) -> Result<DomainDecomposition> {
    if height < 3 || width < 3 {
        return Err(Error::DimensionTooSmall { height, width });
    }
    let mut d = DomainDecomposition::default();
    for i1 in 0..height {
        for i2 in 0..width {
            let bucket = match PixelClass::of(i1, i2, height, width) {
                PixelClass::Interior => &mut d.interior,
                PixelClass::LeftCorner | PixelClass::LeftEdge => &mut d.left,
                PixelClass::TopCorner | PixelClass::TopEdge => &mut d.top,
                PixelClass::RightCorner | PixelClass::RightEdge => &mut d.right,
                PixelClass::BottomCorner | PixelClass::BottomEdge => &mut d.bottom,
            };
            bucket.push((i1, i2));
        }
    }
    Ok(d)
}
