//! Dense row-major 2-D arrays used for image intensities, labels and masks.

use std::fmt;

use crate::error::{IdaError, Result};

/// A `width x height` row-major grid.
#[derive(Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Plane<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// Integer class map, one class index per pixel.
pub type LabelPlane = Plane<u8>;

impl<T: fmt::Debug> fmt::Debug for Plane<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Plane")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl<T: Copy> Plane<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Plane {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(IdaError::shape(
                format!("{} elements for {width}x{height}", width * height),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Plane {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    /// `(width, height)`.
    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Plane<U> {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    pub fn same_dims<U>(&self, other: &Plane<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Errors unless `other` has the same `(width, height)`.
    pub fn check_dims<U>(&self, other: &Plane<U>, what: &str) -> Result<()> {
        if self.width == other.width && self.height == other.height {
            Ok(())
        } else {
            Err(IdaError::shape(
                format!("{what} {}x{}", self.width, self.height),
                format!("{}x{}", other.width, other.height),
            ))
        }
    }

    /// Nearest-neighbour resample to `width x height` (pixel-centre aligned).
    pub fn resize_nearest(&self, width: usize, height: usize) -> Plane<T> {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Plane::from_fn(width, height, |x, y| {
            let src_x = (((x as f64 + 0.5) * sx).floor() as usize).min(self.width - 1);
            let src_y = (((y as f64 + 0.5) * sy).floor() as usize).min(self.height - 1);
            self.get(src_x, src_y)
        })
    }

    /// Sub-window `[x0, x0+width) x [y0, y0+height)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Plane<T> {
        assert!(x0 + width <= self.width && y0 + height <= self.height);
        Plane::from_fn(width, height, |x, y| self.get(x0 + x, y0 + y))
    }

    pub fn flip_horizontal(&self) -> Plane<T> {
        Plane::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y)
        })
    }

    pub fn flip_vertical(&self) -> Plane<T> {
        Plane::from_fn(self.width, self.height, |x, y| {
            self.get(x, self.height - 1 - y)
        })
    }

    /// Pads by mirroring about the edge pixels (`dcb|abcd|cba`) until the
    /// plane is at least `min_width x min_height`.
    pub fn reflect_pad_to(&self, min_width: usize, min_height: usize) -> Plane<T> {
        let width = self.width.max(min_width);
        let height = self.height.max(min_height);
        if width == self.width && height == self.height {
            return self.clone();
        }
        let left = (width - self.width) / 2;
        let top = (height - self.height) / 2;
        Plane::from_fn(width, height, |x, y| {
            let sx = reflect_index(x as isize - left as isize, self.width);
            let sy = reflect_index(y as isize - top as isize, self.height);
            self.get(sx, sy)
        })
    }
}

fn reflect_index(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

impl LabelPlane {
    pub fn count_class(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Plane::from_vec(3, 2, vec![0u8; 5]).is_err());
    }

    #[test]
    fn nearest_identity_at_same_size() {
        let p = Plane::from_fn(7, 5, |x, y| (x * 10 + y) as u8);
        assert_eq!(p.resize_nearest(7, 5), p);
    }

    #[test]
    fn reflect_pad_mirrors_edges() {
        let p = Plane::from_vec(3, 1, vec![1u8, 2, 3]).unwrap();
        let padded = p.reflect_pad_to(7, 1);
        assert_eq!(padded.as_slice(), &[3, 2, 1, 2, 3, 2, 1]);
    }

    #[test]
    fn flips_are_involutions() {
        let p = Plane::from_fn(4, 3, |x, y| (x + 4 * y) as u8);
        assert_eq!(p.flip_horizontal().flip_horizontal(), p);
        assert_eq!(p.flip_vertical().flip_vertical(), p);
        assert_ne!(p.flip_horizontal(), p);
    }
}
