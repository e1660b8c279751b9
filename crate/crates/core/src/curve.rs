use std::fmt::Write as _;

/// Loss values keyed by integer coordinates (step, or epoch and batch),
/// exported as CSV.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    keys: Vec<&'static str>,
    points: Vec<(Vec<usize>, f64)>,
}

impl LossCurve {
    pub fn new(keys: &[&'static str]) -> Self {
        Self {
            keys: keys.to_vec(),
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, key: &[usize], loss: f64) {
        debug_assert_eq!(key.len(), self.keys.len());
        self.points.push((key.to_vec(), loss));
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[(Vec<usize>, f64)] {
        &self.points
    }

    pub fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|(_, l)| *l)
    }

    /// Mean loss over points whose first key equals `first`.
    pub fn mean_where_first(&self, first: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .points
            .iter()
            .filter(|(k, _)| k.first() == Some(&first))
            .map(|(_, l)| *l)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean loss over the point index range `[start, end)`.
    pub fn window_mean(&self, start: usize, end: usize) -> Option<f64> {
        let end = end.min(self.points.len());
        (start < end).then(|| self.points[start..end].iter().map(|(_, l)| l).sum::<f64>() / (end - start) as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for k in &self.keys {
            out.push_str(k);
            out.push(',');
        }
        out.push_str("loss\n");
        for (key, loss) in &self.points {
            for k in key {
                let _ = write!(out, "{k},");
            }
            let _ = writeln!(out, "{loss}");
        }
        out
    }
}
