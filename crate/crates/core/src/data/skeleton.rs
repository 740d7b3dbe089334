use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interior angle at `joint` between the limbs to `parent` and `child`,
/// constrained to `[min, max]` radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hinge {
    pub parent: usize,
    pub joint: usize,
    pub child: usize,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Skeleton {
    pub name: String,
    pub joints: Vec<String>,
    /// `(parent, child)` pairs forming a tree rooted at joint 0.
    pub edges: Vec<(usize, usize)>,
    /// Reference length of each edge, metres.
    pub limb_lengths: Vec<f64>,
    pub lower: Vec<usize>,
    pub upper: Vec<usize>,
    pub hinges: Vec<Hinge>,
}

impl Skeleton {
    /// Nine joints: pelvis (root), chest, head, two elbows, two hands and two
    /// feet.
    pub fn synthetic() -> Self {
        let names = [
            "pelvis", "chest", "head", "l_elbow", "l_hand", "r_elbow", "r_hand", "l_foot", "r_foot",
        ];
        let hinge = |parent, joint, child, min, max| Hinge {
            parent,
            joint,
            child,
            min,
            max,
        };
        Self {
            name: "synthetic9".into(),
            joints: names.iter().map(|s| s.to_string()).collect(),
            edges: vec![(0, 1), (1, 2), (1, 3), (3, 4), (1, 5), (5, 6), (0, 7), (0, 8)],
            limb_lengths: vec![0.5, 0.25, 0.3, 0.25, 0.3, 0.25, 0.9, 0.9],
            lower: vec![7, 8],
            upper: vec![1, 2, 3, 4, 5, 6],
            hinges: vec![
                hinge(1, 3, 4, 0.5, std::f64::consts::PI),
                hinge(1, 5, 6, 0.5, std::f64::consts::PI),
                hinge(0, 1, 2, 2.0, std::f64::consts::PI),
                hinge(1, 0, 7, 2.0, std::f64::consts::PI),
                hinge(1, 0, 8, 2.0, std::f64::consts::PI),
            ],
        }
    }

    /// Three-joint chain (root, knee, foot) with one hinge, for tiny models.
    pub fn chain3() -> Self {
        Self {
            name: "chain3".into(),
            joints: vec!["root".into(), "knee".into(), "foot".into()],
            edges: vec![(0, 1), (1, 2)],
            limb_lengths: vec![0.4, 0.4],
            lower: vec![2],
            upper: vec![1],
            hinges: vec![Hinge {
                parent: 0,
                joint: 1,
                child: 2,
                min: 0.5,
                max: std::f64::consts::PI,
            }],
        }
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j == name)
    }

    /// Parent of each joint (`None` for the root).
    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut p = vec![None; self.joints.len()];
        for &(a, b) in &self.edges {
            p[b] = Some(a);
        }
        p
    }

    /// Interior angle of every hinge in one flattened `J × 3` frame; `None`
    /// where a limb at the hinge has zero length.
    pub fn hinge_angles(&self, frame: &[f64]) -> Vec<Option<f64>> {
        let p = |i: usize| [frame[3 * i], frame[3 * i + 1], frame[3 * i + 2]];
        self.hinges
            .iter()
            .map(|h| {
                let (a, b, c) = (p(h.parent), p(h.joint), p(h.child));
                let u = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
                let v = [c[0] - b[0], c[1] - b[1], c[2] - b[2]];
                let nu = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
                let nv = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if nu == 0.0 || nv == 0.0 {
                    return None;
                }
                let cos = (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]) / (nu * nv);
                Some(cos.clamp(-1.0, 1.0).acos())
            })
            .collect()
    }

    /// Length of every edge in one flattened frame.
    pub fn edge_lengths(&self, frame: &[f64]) -> Vec<f64> {
        self.edges
            .iter()
            .map(|&(a, b)| {
                (0..3)
                    .map(|c| (frame[3 * a + c] - frame[3 * b + c]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    pub fn mean_limb_length(&self) -> f64 {
        self.limb_lengths.iter().sum::<f64>() / self.limb_lengths.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joints.len();
        let bad = |m: String| Err(Error::Config(format!("skeleton `{}`: {m}", self.name)));
        if j < 2 {
            return bad("needs at least two joints".into());
        }
        if self.edges.len() != j - 1 || self.limb_lengths.len() != self.edges.len() {
            return bad(format!(
                "{} joints need {} edges and lengths, got {} and {}",
                j,
                j - 1,
                self.edges.len(),
                self.limb_lengths.len()
            ));
        }
        let mut parent = vec![None; j];
        for &(a, b) in &self.edges {
            if a >= j || b >= j || b == 0 || parent[b].is_some() {
                return bad(format!("edge ({a}, {b}) breaks the tree rooted at joint 0"));
            }
            parent[b] = Some(a);
        }
        for start in 1..j {
            let mut cur = start;
            let mut steps = 0;
            while cur != 0 {
                cur = match parent[cur] {
                    Some(p) => p,
                    None => return bad(format!("joint {start} is not connected to the root")),
                };
                steps += 1;
                if steps > j {
                    return bad("edges contain a cycle".into());
                }
            }
        }
        if let Some(l) = self.limb_lengths.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return bad(format!("limb length {l} must be positive"));
        }
        let mut seen = vec![false; j];
        for &i in self.lower.iter().chain(&self.upper) {
            if i == 0 || i >= j || seen[i] {
                return bad(format!("joint {i} is invalid or repeated in the body partition"));
            }
            seen[i] = true;
        }
        if seen.iter().skip(1).any(|s| !s) {
            return bad("lower/upper partition must cover every non-root joint".into());
        }
        if self.lower.is_empty() || self.upper.is_empty() {
            return bad("both body parts need at least one joint".into());
        }
        for h in &self.hinges {
            if h.parent >= j || h.joint >= j || h.child >= j || !(h.min <= h.max) {
                return bad(format!("invalid hinge {h:?}"));
            }
        }
        Ok(())
    }
}
