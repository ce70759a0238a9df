//! Binary masks and label maps over batched 2-D grids.

/// Binary mask with shape [batch, height, width].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    batch: usize,
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), batch * height * width, "mask data length mismatch");
        Mask { batch, height, width, data }
    }

    pub fn filled(batch: usize, height: usize, width: usize, value: bool) -> Self {
        Mask { batch, height, width, data: vec![value; batch * height * width] }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.height, self.width)
    }

    #[inline]
    pub fn get(&self, b: usize, y: usize, x: usize) -> bool {
        self.data[(b * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, b: usize, y: usize, x: usize, v: bool) {
        self.data[(b * self.height + y) * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&v| v)
    }

    pub fn complement(&self) -> Mask {
        Mask {
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| !v).collect(),
        }
    }

    pub fn intersect(&self, other: &Mask) -> Mask {
        assert_eq!(self.shape(), other.shape(), "mask shape mismatch");
        Mask {
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!(self.shape(), other.shape(), "mask shape mismatch");
        Mask {
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        }
    }

    /// Pixels in `self` that are not in `other`.
    pub fn minus(&self, other: &Mask) -> Mask {
        assert_eq!(self.shape(), other.shape(), "mask shape mismatch");
        Mask {
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && !*b).collect(),
        }
    }

    /// View one batch entry as a batch-1 mask.
    pub fn slice(&self, b: usize) -> Mask {
        let plane = self.height * self.width;
        Mask {
            batch: 1,
            height: self.height,
            width: self.width,
            data: self.data[b * plane..(b + 1) * plane].to_vec(),
        }
    }
}

/// Label map with shape [batch, height, width]; values are the raw label
/// vocabulary {0, 1, 2, 4}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    batch: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub const VOCABULARY: [u8; 4] = [0, 1, 2, 4];

    pub fn new(batch: usize, height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), batch * height * width, "label data length mismatch");
        LabelMap { batch, height, width, data }
    }

    pub fn zeros(batch: usize, height: usize, width: usize) -> Self {
        LabelMap { batch, height, width, data: vec![0; batch * height * width] }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.height, self.width)
    }

    #[inline]
    pub fn get(&self, b: usize, y: usize, x: usize) -> u8 {
        self.data[(b * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, b: usize, y: usize, x: usize, v: u8) {
        self.data[(b * self.height + y) * self.width + x] = v;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn is_in_vocabulary(&self) -> bool {
        self.data.iter().all(|v| LabelMap::VOCABULARY.contains(v))
    }

    /// Mask of pixels whose label satisfies `pred`.
    pub fn mask_where(&self, pred: impl Fn(u8) -> bool) -> Mask {
        Mask::new(self.batch, self.height, self.width, self.data.iter().map(|&v| pred(v)).collect())
    }

    /// Mask of nonzero labels.
    pub fn tumor_mask(&self) -> Mask {
        self.mask_where(|v| v != 0)
    }

    pub fn slice(&self, b: usize) -> LabelMap {
        let plane = self.height * self.width;
        LabelMap {
            batch: 1,
            height: self.height,
            width: self.width,
            data: self.data[b * plane..(b + 1) * plane].to_vec(),
        }
    }

    /// Stack batch-1 maps into one batched map.
    pub fn stack(maps: &[LabelMap]) -> LabelMap {
        assert!(!maps.is_empty());
        let (b0, h, w) = maps[0].shape();
        assert_eq!(b0, 1);
        let mut data = Vec::with_capacity(maps.len() * h * w);
        for m in maps {
            assert_eq!(m.shape(), (1, h, w), "stacked label maps must share extents");
            data.extend_from_slice(&m.data);
        }
        LabelMap::new(maps.len(), h, w, data)
    }
}

impl Mask {
    /// Stack batch-1 masks into one batched mask.
    pub fn stack(masks: &[Mask]) -> Mask {
        assert!(!masks.is_empty());
        let (b0, h, w) = masks[0].shape();
        assert_eq!(b0, 1);
        let mut data = Vec::with_capacity(masks.len() * h * w);
        for m in masks {
            assert_eq!(m.shape(), (1, h, w), "stacked masks must share extents");
            data.extend_from_slice(&m.data);
        }
        Mask::new(masks.len(), h, w, data)
    }
}
