use std::collections::HashMap;

use super::matrix::Matrix;

pub type ParamVisitor<'a> = dyn FnMut(&str, &Matrix) + 'a;
pub type ParamVisitorMut<'a> = dyn FnMut(&str, &mut Matrix) + 'a;

/// Anything holding named trainable tensors.
pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut ParamVisitor<'_>);
    fn visit_params_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_>);

    /// Flattens the parameters into `(name, tensor)` records in visit order.
    fn named_tensors(&self, prefix: &str) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        self.visit_params(prefix, &mut |name, m| out.push((name.to_string(), m.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, m| n += m.len());
        n
    }

    /// Overwrites parameters from named tensors. Every parameter must be
    /// present with a matching shape; returns the first offending name otherwise.
    fn load_tensors(&mut self, prefix: &str, tensors: &[(String, Matrix)]) -> Result<(), String> {
        let by_name: HashMap<&str, &Matrix> =
            tensors.iter().map(|(n, m)| (n.as_str(), m)).collect();
        let mut failure = None;
        self.visit_params_mut(prefix, &mut |name, m| {
            if failure.is_some() {
                return;
            }
            match by_name.get(name) {
                Some(src) if src.shape() == m.shape() => *m = (*src).clone(),
                Some(src) => {
                    failure = Some(format!(
                        "{name}: shape {:?} does not match expected {:?}",
                        src.shape(),
                        m.shape()
                    ))
                }
                None => failure = Some(format!("{name}: missing from checkpoint")),
            }
        });
        failure.map_or(Ok(()), Err)
    }
}
