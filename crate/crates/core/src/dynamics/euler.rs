use std::io::{Read, Write};

use super::DynamicsError;

/// Norm beyond which a state counts as divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub fields: Option<Vec<Vec<f64>>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("non-empty trajectory")
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DynamicsError> {
        let n = self.states.first().map_or(0, Vec::len);
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        if self.fields.is_some() {
            header.extend((1..=n).map(|i| format!("f{i}")));
        }
        out.write_record(&header)?;
        for (k, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            let mut rec = vec![fmt17(*t)];
            rec.extend(x.iter().map(|&v| fmt17(v)));
            if let Some(f) = &self.fields {
                rec.extend(f[k].iter().map(|&v| fmt17(v)));
            }
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, DynamicsError> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let nx = header.iter().filter(|h| h.starts_with('x')).count();
        let nf = header.iter().filter(|h| h.starts_with('f')).count();
        if header.get(0) != Some("t") || (nf != 0 && nf != nx) || header.len() != 1 + nx + nf {
            return Err(DynamicsError::Format(format!("unexpected trajectory header {header:?}")));
        }
        let mut tr = Trajectory { times: vec![], states: vec![], fields: (nf > 0).then(Vec::new) };
        for rec in rd.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| DynamicsError::Format(e.to_string()))?;
            tr.times.push(vals[0]);
            tr.states.push(vals[1..1 + nx].to_vec());
            if let Some(f) = tr.fields.as_mut() {
                f.push(vals[1 + nx..].to_vec());
            }
        }
        Ok(tr)
    }
}

/// Scientific notation with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Explicit Euler `x_{k+1} = x_k + dt f(x_k)`, recording the field at every
/// stored state. A state with norm above [`DIVERGENCE_LIMIT`] (or non-finite)
/// stops the run with [`DynamicsError::Diverged`], which keeps the prefix.
pub fn integrate_euler<F>(mut field: F, x0: &[f64], dt: f64, steps: usize) -> Result<Trajectory, DynamicsError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, DynamicsError>,
{
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::Config(format!("dt must be positive, got {dt}")));
    }
    if steps == 0 {
        return Err(DynamicsError::Config("steps must be at least 1".into()));
    }
    let mut tr = Trajectory {
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        fields: Some(Vec::with_capacity(steps + 1)),
    };
    let mut x = x0.to_vec();
    for k in 0..=steps {
        let f = field(&x)?;
        if f.len() != x.len() {
            return Err(DynamicsError::Shape(format!("field returned length {}, state {}", f.len(), x.len())));
        }
        tr.times.push(k as f64 * dt);
        tr.states.push(x.clone());
        tr.fields.as_mut().expect("fields").push(f.clone());
        if k == steps {
            break;
        }
        for (xi, fi) in x.iter_mut().zip(&f) {
            *xi += dt * fi;
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm <= DIVERGENCE_LIMIT) {
            return Err(DynamicsError::Diverged { step: k + 1, partial: Box::new(tr) });
        }
    }
    Ok(tr)
}
