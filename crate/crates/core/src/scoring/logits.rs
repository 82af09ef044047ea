use std::borrow::Cow;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{self, EmbeddingMatrix, Tensor, UNIT_NORM_TOL};

/// Extent of a P×N×C logits cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CubeShape {
    pub prompts: usize,
    pub images: usize,
    pub classes: usize,
}

impl CubeShape {
    pub fn slab_len(&self) -> usize {
        self.images * self.classes
    }
}

/// Anything that can hand out the N×C logits slab of one prompt at a time.
///
/// Slabs are row-major over (image, class). Implementations must return the
/// same values on every call.
pub trait LogitsSource: Sync {
    fn shape(&self) -> CubeShape;
    fn prompt_logits(&self, prompt: usize) -> Cow<'_, [f32]>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Embeddings,
    Loaded,
}

/// Materialized P×N×C logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsCube {
    shape: CubeShape,
    data: Vec<f32>,
    provenance: Provenance,
}

impl LogitsCube {
    pub fn new(shape: CubeShape, data: Vec<f32>) -> Result<Self> {
        let tensor = Tensor::from_f32(vec![shape.prompts, shape.images, shape.classes], data)?;
        Self::from_tensor(tensor)
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        tensor.expect_f32(3, "logits cube")?;
        let dims = tensor.dims();
        let shape = CubeShape {
            prompts: dims[0],
            images: dims[1],
            classes: dims[2],
        };
        let data = match tensor.data() {
            tensor::TensorData::F32(v) => v.clone(),
            tensor::TensorData::U32(_) => unreachable!("checked f32 above"),
        };
        Ok(LogitsCube {
            shape,
            data,
            provenance: Provenance::Loaded,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        let s = self.shape;
        Tensor::from_f32(vec![s.prompts, s.images, s.classes], self.data.clone())
            .expect("cube invariants hold")
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, prompt: usize, image: usize, class: usize) -> f32 {
        let s = self.shape;
        self.data[(prompt * s.images + image) * s.classes + class]
    }

    /// Keeps only the first `count` images of every prompt.
    pub fn head_images(&self, count: usize) -> Result<Self> {
        let s = self.shape;
        let keep = count.min(s.images);
        if keep == 0 {
            return Err(Error::InvalidConfig("cannot keep zero images".into()));
        }
        let mut data = Vec::with_capacity(s.prompts * keep * s.classes);
        for p in 0..s.prompts {
            let start = p * s.slab_len();
            data.extend_from_slice(&self.data[start..start + keep * s.classes]);
        }
        Ok(LogitsCube {
            shape: CubeShape { images: keep, ..s },
            data,
            provenance: self.provenance,
        })
    }
}

impl LogitsSource for LogitsCube {
    fn shape(&self) -> CubeShape {
        self.shape
    }

    fn prompt_logits(&self, prompt: usize) -> Cow<'_, [f32]> {
        let len = self.shape.slab_len();
        Cow::Borrowed(&self.data[prompt * len..(prompt + 1) * len])
    }
}

pub fn load_logits_cube(path: impl AsRef<Path>) -> Result<LogitsCube> {
    LogitsCube::from_tensor(tensor::read_tensor(path)?)
}

/// Logits computed lazily from unit-norm image and class embeddings.
///
/// Never materializes the full cube, so it scales to pools and datasets whose
/// cube would not fit in memory.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingLogits<'a> {
    images: &'a EmbeddingMatrix,
    class_emb: &'a [f32],
    shape: CubeShape,
    dim: usize,
}

impl<'a> EmbeddingLogits<'a> {
    /// `class_emb` is the P×C×D tensor of per-prompt class embeddings.
    pub fn new(images: &'a EmbeddingMatrix, class_emb: &'a Tensor) -> Result<Self> {
        let values = class_emb.expect_f32(3, "class embeddings")?;
        images.require_normalized()?;
        let dims = class_emb.dims();
        let dim = images.dim();
        if dims[2] != dim {
            return Err(Error::dims(format!(
                "image embeddings have D = {dim}, class embeddings have D = {}",
                dims[2]
            )));
        }
        if let Some((row, norm)) = values
            .chunks_exact(dim)
            .map(tensor::row_norm)
            .enumerate()
            .find(|(_, n)| (n - 1.0).abs() > UNIT_NORM_TOL)
        {
            return Err(Error::NotNormalized { row, norm });
        }
        Ok(EmbeddingLogits {
            images,
            class_emb: values,
            shape: CubeShape {
                prompts: dims[0],
                images: images.rows(),
                classes: dims[1],
            },
            dim,
        })
    }
}

impl LogitsSource for EmbeddingLogits<'_> {
    fn shape(&self) -> CubeShape {
        self.shape
    }

    fn prompt_logits(&self, prompt: usize) -> Cow<'_, [f32]> {
        let CubeShape {
            images, classes, ..
        } = self.shape;
        let d = self.dim;
        let text = &self.class_emb[prompt * classes * d..(prompt + 1) * classes * d];
        let mut out = vec![0f32; images * classes];
        out.par_chunks_mut(classes)
            .enumerate()
            .for_each(|(n, row)| {
                let image = self.images.row(n);
                for (c, slot) in row.iter_mut().enumerate() {
                    *slot = dot(image, &text[c * d..(c + 1) * d]) as f32;
                }
            });
        Cow::Owned(out)
    }
}

/// f64 dot product, accumulated in ascending index order.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Materializes the full cube: entry (p, n, c) = images[n] · class_emb[p, c].
pub fn compute_logits(images: &EmbeddingMatrix, class_emb: &Tensor) -> Result<LogitsCube> {
    let source = EmbeddingLogits::new(images, class_emb)?;
    Ok(materialize(&source))
}

/// Copies any source into an owned cube.
pub fn materialize(source: &dyn LogitsSource) -> LogitsCube {
    let shape = source.shape();
    let slabs: Vec<Vec<f32>> = (0..shape.prompts)
        .into_par_iter()
        .map(|p| source.prompt_logits(p).into_owned())
        .collect();
    LogitsCube {
        shape,
        data: slabs.concat(),
        provenance: Provenance::Embeddings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_images(rows: &[[f32; 2]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows.len(), 2, rows.concat()).unwrap()
    }

    #[test]
    fn hand_computed_cube() {
        let images = unit_images(&[[1.0, 0.0], [0.0, 1.0]]);
        let class_emb = Tensor::from_f32(vec![1, 2, 2], vec![1.0, 0.0, 0.6, 0.8]).unwrap();
        let cube = compute_logits(&images, &class_emb).unwrap();
        assert_eq!(
            cube.shape(),
            CubeShape {
                prompts: 1,
                images: 2,
                classes: 2
            }
        );
        let expect = [1.0, 0.6, 0.0, 0.8];
        for (got, want) in cube.values().iter().zip(expect) {
            assert!((got - want).abs() < 1e-6);
        }
        assert_eq!(cube.provenance(), Provenance::Embeddings);
    }

    #[test]
    fn identical_and_orthogonal_vectors() {
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let images = unit_images(&[[s, s]]);
        let class_emb = Tensor::from_f32(vec![1, 2, 2], vec![s, s, -s, s]).unwrap();
        let cube = compute_logits(&images, &class_emb).unwrap();
        assert!((cube.get(0, 0, 0) - 1.0).abs() < 1e-6);
        assert!(cube.get(0, 0, 1).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let images = unit_images(&[[1.0, 0.0]]);
        let wrong_d = Tensor::from_f32(vec![1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            compute_logits(&images, &wrong_d),
            Err(Error::DimMismatch(_))
        ));

        let not_unit = Tensor::from_f32(vec![1, 1, 2], vec![2.0, 0.0]).unwrap();
        assert!(matches!(
            compute_logits(&images, &not_unit),
            Err(Error::NotNormalized { .. })
        ));

        let raw = EmbeddingMatrix::from_rows(1, 2, vec![3.0, 4.0]).unwrap();
        let ok = Tensor::from_f32(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(
            compute_logits(&raw, &ok),
            Err(Error::NotNormalized { .. })
        ));
    }

    #[test]
    fn head_images_keeps_prefix() {
        let cube = LogitsCube::new(
            CubeShape {
                prompts: 2,
                images: 3,
                classes: 1,
            },
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        )
        .unwrap();
        let head = cube.head_images(2).unwrap();
        assert_eq!(head.values(), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(cube.head_images(10).unwrap(), cube);
    }
}
