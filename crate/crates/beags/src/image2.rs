//! Row-major 2D buffers for render channels and masks.

use crate::Vec3;

/// Sentinel for semantic pixels with accumulated alpha below 0.5.
pub const EMPTY_CLASS: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct Image2<T> {
    width: u32,
    height: u32,
    data: Vec<T>,
}

impl<T: Clone> Image2<T> {
    pub fn filled(width: u32, height: u32, value: T) -> Self {
        Image2 {
            width,
            height,
            data: vec![value; (width * height) as usize],
        }
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<T>) -> Self {
        assert_eq!(data.len(), (width * height) as usize);
        Image2 {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn same_size<U: Clone>(&self, other: &Image2<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> &T {
        &self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: T) {
        self.data[(y * self.width + x) as usize] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map<U: Clone>(&self, f: impl Fn(&T) -> U) -> Image2<U> {
        Image2 {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// (x, y, value) in row-major order.
    pub fn enumerate(&self) -> impl Iterator<Item = (u32, u32, &T)> {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, v)| (i as u32 % w, i as u32 / w, v))
    }
}

pub type ScalarImage = Image2<f64>;
pub type ColorImage = Image2<Vec3>;
pub type ClassImage = Image2<u32>;
pub type BoolImage = Image2<bool>;

impl ScalarImage {
    pub fn zeros(width: u32, height: u32) -> Self {
        Image2::filled(width, height, 0.0)
    }
}

impl ColorImage {
    pub fn black(width: u32, height: u32) -> Self {
        Image2::filled(width, height, Vec3::zeros())
    }
}
