//! Global contrast pooling.
//!
//! A bag of `k` instance vectors is summarized by `p` learnable concepts: the
//! m-th output coordinate is the largest cosine similarity between concept
//! `m` and any instance. Concept rows are kept at unit norm by
//! [`ConceptBank::regularize`] after every optimizer step.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensorcore::{Backward, Graph, Tensor, Var};

/// Guards the cosine denominator.
pub const COS_EPS: f64 = 1e-8;

/// Rows with a norm below this are replaced by a fixed basis direction.
pub const RENORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptBank {
    concepts: Tensor,
}

impl ConceptBank {
    /// `p` random unit concepts of dimension `d`.
    pub fn random<R: Rng + ?Sized>(p: usize, d: usize, rng: &mut R) -> Result<Self> {
        if p == 0 || d == 0 {
            return Err(Error::Invalid(format!(
                "concept bank needs p, d >= 1, got {p}x{d}"
            )));
        }
        let data = (0..p * d).map(|_| rng.sample(StandardNormal)).collect();
        let mut concepts = Tensor::new(vec![p, d], data)?;
        renormalize_rows(&mut concepts);
        Ok(Self { concepts })
    }

    pub fn from_tensor(concepts: Tensor) -> Result<Self> {
        if concepts.shape().len() != 2 {
            return Err(Error::Invalid(format!(
                "concept bank must be [p, d], got {:?}",
                concepts.shape()
            )));
        }
        Ok(Self { concepts })
    }

    pub fn p(&self) -> usize {
        self.concepts.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.concepts.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.concepts
    }

    pub fn into_tensor(self) -> Tensor {
        self.concepts
    }

    pub fn regularize(&mut self) {
        renormalize_rows(&mut self.concepts);
    }
}

/// Divides each row of a `[p, d]` tensor by its Euclidean norm. A row whose
/// norm is below [`RENORM_FLOOR`] becomes the basis vector `e_{m mod d}`.
pub fn renormalize_rows(t: &mut Tensor) {
    let d = *t.shape().last().expect("rank >= 1");
    for (m, row) in t.data_mut().chunks_mut(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < RENORM_FLOOR {
            row.fill(0.0);
            row[m % d] = 1.0;
        } else {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

/// Instance features of one bag, `[k, d]` with `k >= 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSet {
    features: Tensor,
}

impl InstanceSet {
    pub fn new(features: Tensor) -> Result<Self> {
        let s = features.shape();
        if s.len() != 2 {
            return Err(Error::Invalid(format!(
                "instance set must be [k, d], got {s:?}"
            )));
        }
        if !features.is_finite() {
            return Err(Error::Invalid("instance features must be finite".into()));
        }
        Ok(Self { features })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::EmptyBag);
        };
        let d = first.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Invalid("instance rows differ in dimension".into()));
        }
        Self::new(Tensor::new(vec![rows.len(), d], rows.concat())?)
    }

    pub fn k(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.features
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `a.b / (|a||b| + COS_EPS)`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b) + COS_EPS)
}

/// Pools one bag; no gradient tracking.
pub fn gcp_forward(instances: &InstanceSet, bank: &ConceptBank) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let k = instances.k();
    let d = instances.d();
    let x = g.constant(instances.tensor().clone().reshape(vec![1, k, d])?);
    let w = g.constant(bank.tensor().clone());
    let out = g.gcp(x, w)?;
    Ok(g.value(out).data().to_vec())
}

/// Pools several bags, possibly of different sizes, one at a time.
pub fn gcp_forward_batch(bags: &[InstanceSet], bank: &ConceptBank) -> Result<Vec<Vec<f64>>> {
    bags.iter().map(|b| gcp_forward(b, bank)).collect()
}

struct GcpVjp {
    argmax: Vec<usize>,
    bags: usize,
    k: usize,
    d: usize,
    p: usize,
}

impl Backward for GcpVjp {
    fn backward(&self, inputs: &[&Tensor], needs: &[bool], g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0].data(), inputs[1].data());
        let d = self.d;
        let mut dx = needs[0].then(|| vec![0.0; x.len()]);
        let mut dw = needs[1].then(|| vec![0.0; w.len()]);
        for b in 0..self.bags {
            for m in 0..self.p {
                let gm = g[b * self.p + m];
                if gm == 0.0 {
                    continue;
                }
                let kstar = self.argmax[b * self.p + m];
                let xo = (b * self.k + kstar) * d;
                let xi = &x[xo..xo + d];
                let wm = &w[m * d..(m + 1) * d];
                let (nx, nw, dt) = (norm(xi), norm(wm), dot(xi, wm));
                let denom = nw * nx + COS_EPS;
                let coef = dt / (denom * denom);
                if let Some(dw) = dw.as_mut() {
                    let radial = if nw > 0.0 { coef * nx / nw } else { 0.0 };
                    for j in 0..d {
                        dw[m * d + j] += gm * (xi[j] / denom - radial * wm[j]);
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let radial = if nx > 0.0 { coef * nw / nx } else { 0.0 };
                    for j in 0..d {
                        dx[xo + j] += gm * (wm[j] / denom - radial * xi[j]);
                    }
                }
            }
        }
        vec![dx, dw]
    }
}

impl Graph {
    /// Global contrast pooling of instance sets `[B, k, d]` against concepts
    /// `[p, d]`, giving `[B, p]`. The gradient of each output flows only to
    /// its maximizing instance; ties go to the lowest instance index.
    pub fn gcp(&mut self, instances: Var, concepts: Var) -> Result<Var> {
        let xs = self.shape(instances).to_vec();
        let ws = self.shape(concepts).to_vec();
        if xs.len() != 3 || ws.len() != 2 || xs[2] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "gcp",
                lhs: xs,
                rhs: ws,
            });
        }
        let (bags, k, d, p) = (xs[0], xs[1], xs[2], ws[0]);
        if k == 0 {
            return Err(Error::EmptyBag);
        }
        let x = self.value(instances).data();
        let w = self.value(concepts).data();
        let xnorm: Vec<f64> = x.chunks(d).map(norm).collect();
        let wnorm: Vec<f64> = w.chunks(d).map(norm).collect();
        let mut out = Vec::with_capacity(bags * p);
        let mut argmax = Vec::with_capacity(bags * p);
        for b in 0..bags {
            for m in 0..p {
                let wm = &w[m * d..(m + 1) * d];
                let mut best = f64::NEG_INFINITY;
                let mut best_k = 0;
                for i in 0..k {
                    let row = b * k + i;
                    let s = dot(&x[row * d..(row + 1) * d], wm) / (wnorm[m] * xnorm[row] + COS_EPS);
                    if s > best {
                        best = s;
                        best_k = i;
                    }
                }
                out.push(best);
                argmax.push(best_k);
            }
        }
        let value = Tensor::new(vec![bags, p], out)?;
        let vjp = GcpVjp {
            argmax,
            bags,
            k,
            d,
            p,
        };
        Ok(self.custom(&[instances, concepts], value, Box::new(vjp)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank(rows: &[Vec<f64>]) -> ConceptBank {
        let d = rows[0].len();
        ConceptBank::from_tensor(Tensor::new(vec![rows.len(), d], rows.concat()).unwrap()).unwrap()
    }

    #[test]
    fn identical_instance_and_concept() {
        let v = vec![0.3, -1.2, 2.0];
        let phi = gcp_forward(&InstanceSet::from_rows(&[v.clone()]).unwrap(), &bank(&[v])).unwrap();
        assert!((phi[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn orthogonal_concept_scores_zero() {
        let inst = InstanceSet::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0]]).unwrap();
        let phi = gcp_forward(&inst, &bank(&[vec![0.0, 0.0, 1.0]])).unwrap();
        assert_eq!(phi, vec![0.0]);
    }

    #[test]
    fn worked_examples() {
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let inst = InstanceSet::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![r, r]]).unwrap();
        let phi = gcp_forward(&inst, &bank(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        assert!(phi.iter().all(|s| (s - 1.0).abs() < 1e-8));

        let inst = InstanceSet::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]]).unwrap();
        let phi = gcp_forward(&inst, &bank(&[vec![0.0, 1.0]])).unwrap();
        assert!((phi[0] - 0.8).abs() < 1e-8);
    }

    #[test]
    fn empty_bag_is_rejected() {
        assert!(matches!(InstanceSet::from_rows(&[]), Err(Error::EmptyBag)));
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 2]));
        let w = g.constant(Tensor::zeros(&[1, 3]));
        assert!(g.gcp(x, w).is_err());
    }

    #[test]
    fn ties_route_to_lowest_index() {
        let mut g = Graph::new();
        let x = g.input(
            Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 1.0, 0.0])
                .unwrap()
                .requires_grad(true),
        );
        let w = g.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let s = g.gcp(x, w).unwrap();
        let total = g.sum(s);
        g.backward(total).unwrap();
        let dx = g.grad(x).unwrap();
        assert!(dx[0] != 0.0 || dx[1] != 0.0);
        assert_eq!(&dx[2..], &[0.0, 0.0]);
    }

    #[test]
    fn regularize_examples() {
        let mut t = Tensor::new(vec![3, 2], vec![3.0, 4.0, 0.6, 0.8, 1e-14, 0.0]).unwrap();
        renormalize_rows(&mut t);
        assert_eq!(&t.data()[..4], &[0.6, 0.8, 0.6, 0.8]);
        // near-zero third row falls back to e_(2 mod 2) = e_0
        assert_eq!(&t.data()[4..], &[1.0, 0.0]);
    }

    #[test]
    fn random_bank_is_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = ConceptBank::random(5, 7, &mut rng).unwrap();
        for row in b.tensor().data().chunks(7) {
            assert!((norm(row) - 1.0).abs() < 1e-12);
        }
    }
}
