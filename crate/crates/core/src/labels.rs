//! Integer class maps in batch × height × width layout.

use crate::error::{dim_err, Error, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    shape: [usize; 3],
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: [usize; 3], data: Vec<u8>) -> Result<Self> {
        if shape.contains(&0) {
            return dim_err(format!("label shape {shape:?} has a zero extent"));
        }
        if shape.iter().product::<usize>() != data.len() {
            return dim_err(format!(
                "label shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: [usize; 3], value: u8) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Fails unless every non-ignored label is below `classes`.
    pub fn check_range(&self, classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .position(|&l| l != IGNORE && l as usize >= classes)
        {
            None => Ok(()),
            Some(i) => Err(Error::Data(format!(
                "label {} at flat index {i} outside [0, {classes})",
                self.data[i]
            ))),
        }
    }

    pub fn batch_slice(&self, start: usize, count: usize) -> Result<Self> {
        let [n, h, w] = self.shape;
        if count == 0 || start + count > n {
            return dim_err(format!("label batch slice {start}+{count} out of range {n}"));
        }
        let per = h * w;
        Ok(Self {
            shape: [count, h, w],
            data: self.data[start * per..(start + count) * per].to_vec(),
        })
    }

    pub fn stack(items: &[&Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Empty("stack of zero label maps".into()))?;
        let [_, h, w] = first.shape;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for m in items {
            if m.shape[1..] != first.shape[1..] {
                return dim_err(format!("cannot stack labels {:?} with {:?}", m.shape, first.shape));
            }
            n += m.shape[0];
            data.extend_from_slice(&m.data);
        }
        Ok(Self {
            shape: [n, h, w],
            data,
        })
    }
}
