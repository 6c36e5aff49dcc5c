//! Label-conditional group-mean connectivity templates.

use autograd::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GroupTemplates {
    /// Mean Fisher-z FC over MDD training subjects.
    pub mdd: Tensor,
    /// Mean Fisher-z FC over HC training subjects.
    pub hc: Tensor,
    /// Ids of every subject that contributed, for leakage audits.
    pub members: Vec<String>,
}

impl GroupTemplates {
    /// Template matching `label` (1 = MDD).
    pub fn for_label(&self, label: u8) -> &Tensor {
        if label == 1 {
            &self.mdd
        } else {
            &self.hc
        }
    }
}

/// Elementwise means of `fc` per label over `(id, label, fc)` triples.
pub fn group_templates<'a, I>(subjects: I) -> Result<GroupTemplates>
where
    I: IntoIterator<Item = (&'a str, u8, &'a Tensor)>,
{
    let mut sums: [Option<Tensor>; 2] = [None, None];
    let mut counts = [0usize; 2];
    let mut members = Vec::new();
    for (id, label, fc) in subjects {
        let slot = &mut sums[(label == 1) as usize];
        match slot {
            None => *slot = Some(fc.clone()),
            Some(acc) => {
                if acc.shape() != fc.shape() {
                    return Err(Error::Data(format!("subject {id}: FC shape differs from other subjects")));
                }
                for (a, v) in acc.data_mut().iter_mut().zip(fc.data()) {
                    *a += v;
                }
            }
        }
        counts[(label == 1) as usize] += 1;
        members.push(id.to_string());
    }
    let [hc, mdd] = sums;
    let (Some(hc), Some(mdd)) = (hc, mdd) else {
        return Err(Error::Data("group templates need both labels in the training split".into()));
    };
    Ok(GroupTemplates {
        mdd: mdd.map(|v| v / counts[1] as f64),
        hc: hc.map(|v| v / counts[0] as f64),
        members,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_subject_template_is_its_fc() {
        let f = Tensor::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 0.1 * (i + j) as f64 });
        let g = Tensor::zeros(3, 3);
        let t = group_templates([("a", 1, &f), ("b", 0, &g)]).unwrap();
        assert_eq!(t.mdd, f);
        assert_eq!(t.for_label(0), &g);
    }

    #[test]
    fn opposite_fcs_cancel() {
        let f = Tensor::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 0.3 });
        let nf = f.map(|v| -v);
        let z = Tensor::zeros(3, 3);
        let t = group_templates([("a", 0, &f), ("b", 0, &nf), ("c", 1, &z)]).unwrap();
        assert!(t.hc.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_label_rejected() {
        let f = Tensor::zeros(2, 2);
        assert!(group_templates([("a", 1, &f)]).is_err());
    }
}
