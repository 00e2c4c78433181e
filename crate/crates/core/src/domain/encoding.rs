use super::{DomainError, FeatureKind, FeatureSchema};
use serde::{Deserialize, Serialize};

/// Model-space representation of a sample: z-scored continuous features and
/// one-hot nominal groups, in schema order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedSample(pub Vec<f64>);

impl EncodedSample {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Column {
    Scaled { mean: f64, std: f64 },
    OneHot { levels: usize },
}

/// Raw ↔ encoded transform fitted once on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    columns: Vec<Column>,
}

impl Encoder {
    /// Fits per-feature mean and population standard deviation. A constant
    /// column gets unit scale so encoding stays finite.
    pub fn fit(schema: &FeatureSchema, rows: &[Vec<f64>]) -> Result<Self, DomainError> {
        if rows.is_empty() {
            return Err(DomainError::SchemaMismatch("cannot fit encoder on no rows".into()));
        }
        for r in rows {
            schema.validate_vector(r)?;
        }
        let n = rows.len() as f64;
        let columns = schema
            .features
            .iter()
            .enumerate()
            .map(|(j, f)| match f.kind {
                FeatureKind::Nominal => Column::OneHot {
                    levels: f.levels.len(),
                },
                FeatureKind::Continuous => {
                    let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
                    let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
                    let std = var.sqrt();
                    Column::Scaled {
                        mean,
                        std: if std > 1e-12 { std } else { 1.0 },
                    }
                }
            })
            .collect();
        Ok(Self { columns })
    }

    pub fn raw_len(&self) -> usize {
        self.columns.len()
    }

    pub fn encoded_len(&self) -> usize {
        self.columns
            .iter()
            .map(|c| match c {
                Column::Scaled { .. } => 1,
                Column::OneHot { levels } => *levels,
            })
            .sum()
    }

    pub fn encode(&self, raw: &[f64]) -> Result<EncodedSample, DomainError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(raw, &mut out)?;
        Ok(EncodedSample(out))
    }

    pub fn encode_into(&self, raw: &[f64], out: &mut Vec<f64>) -> Result<(), DomainError> {
        if raw.len() != self.columns.len() {
            return Err(DomainError::SchemaMismatch(format!(
                "expected {} features, got {}",
                self.columns.len(),
                raw.len()
            )));
        }
        out.clear();
        for (j, (c, &v)) in self.columns.iter().zip(raw).enumerate() {
            match *c {
                Column::Scaled { mean, std } => out.push((v - mean) / std),
                Column::OneHot { levels } => {
                    if v.fract() != 0.0 || v < 0.0 || v as usize >= levels {
                        return Err(DomainError::SchemaMismatch(format!(
                            "feature {j}: unknown level {v}"
                        )));
                    }
                    let hot = v as usize;
                    out.extend((0..levels).map(|l| if l == hot { 1.0 } else { 0.0 }));
                }
            }
        }
        Ok(())
    }

    pub fn decode(&self, encoded: &EncodedSample) -> Result<Vec<f64>, DomainError> {
        let e = encoded.as_slice();
        if e.len() != self.encoded_len() {
            return Err(DomainError::SchemaMismatch(format!(
                "expected {} encoded values, got {}",
                self.encoded_len(),
                e.len()
            )));
        }
        let mut raw = Vec::with_capacity(self.columns.len());
        let mut at = 0;
        for c in &self.columns {
            match *c {
                Column::Scaled { mean, std } => {
                    raw.push(e[at] * std + mean);
                    at += 1;
                }
                Column::OneHot { levels } => {
                    let group = &e[at..at + levels];
                    let hot = group
                        .iter()
                        .position(|&g| g == 1.0)
                        .filter(|_| group.iter().sum::<f64>() == 1.0)
                        .ok_or_else(|| {
                            DomainError::SchemaMismatch(format!("one-hot group {group:?} is not a unit vector"))
                        })?;
                    raw.push(hot as f64);
                    at += levels;
                }
            }
        }
        Ok(raw)
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::{row_one, row_two};
    use super::super::{default_schema, Feature};
    use super::*;
    use proptest::prelude::*;

    fn encoder() -> Encoder {
        let rows = vec![row_one().features(), row_two().features()];
        Encoder::fit(&default_schema(), &rows).unwrap()
    }

    #[test]
    fn z_score_matches_definition() {
        // carb column: 20 and 40 → mean 30, population std 10
        let mut a = row_one();
        a.carb_size = 20.0;
        let mut b = row_two();
        b.carb_size = 40.0;
        let enc = Encoder::fit(&default_schema(), &[a.features(), b.features()]).unwrap();
        let e = enc.encode(&a.features()).unwrap();
        // age(1) sex(2) ethnicity(3) a1c(1) → carb is the 8th encoded value
        assert!((e.0[7] - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn sex_one_hot_layout() {
        let enc = encoder();
        let mut s = row_one();
        let f = enc.encode(&s.features()).unwrap();
        assert_eq!(&f.0[1..3], &[1.0, 0.0]);
        s.sex = crate::domain::Sex::M;
        let m = enc.encode(&s.features()).unwrap();
        assert_eq!(&m.0[1..3], &[0.0, 1.0]);
        assert_eq!(enc.encoded_len(), 16);
    }

    #[test]
    fn table_row_round_trips() {
        let enc = encoder();
        let row = row_one();
        let back = enc.decode(&enc.encode(&row.features()).unwrap()).unwrap();
        let restored = row.with_features(&back.iter().map(|v| {
            // integer-valued columns come back within float noise
            if (v - v.round()).abs() < 1e-9 { v.round() } else { *v }
        }).collect::<Vec<_>>()).unwrap();
        for f in Feature::ALL {
            let (a, b) = (row.feature(f), restored.feature(f));
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{f}: {a} vs {b}");
        }
    }

    #[test]
    fn unknown_level_is_schema_mismatch() {
        let enc = encoder();
        let mut v = row_one().features();
        v[Feature::Ethnicity.index()] = 7.0;
        assert!(matches!(enc.encode(&v), Err(DomainError::SchemaMismatch(_))));
    }

    proptest! {
        #[test]
        fn one_hot_groups_sum_to_one_and_round_trip(
            carb in 0.0f64..200.0,
            bolus in 0.0f64..20.0,
            dt in -90.0f64..90.0,
            bgl in 40.0f64..400.0,
            sex in 0usize..2,
            eth in 0usize..3,
            mode in 0usize..3,
        ) {
            let enc = encoder();
            let mut v = row_two().features();
            v[Feature::CarbSize.index()] = carb;
            v[Feature::TotalBolus.index()] = bolus;
            v[Feature::DeltaT.index()] = dt;
            v[Feature::PremealBgl.index()] = bgl;
            v[Feature::Sex.index()] = sex as f64;
            v[Feature::Ethnicity.index()] = eth as f64;
            v[Feature::Mode.index()] = mode as f64;
            let e = enc.encode(&v).unwrap();
            prop_assert_eq!(e.0[1] + e.0[2], 1.0);
            prop_assert_eq!(e.0[3] + e.0[4] + e.0[5], 1.0);
            prop_assert_eq!(e.0[10] + e.0[11] + e.0[12], 1.0);
            let back = enc.decode(&e).unwrap();
            for (a, b) in v.iter().zip(&back) {
                prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
            }
        }
    }
}
