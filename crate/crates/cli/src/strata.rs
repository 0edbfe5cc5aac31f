use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use deepcox::cohort::Person;
use serde::Serialize;

/// Sub-population splits for stratified calibration and discrimination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StratifyKey {
    /// 15-year age bands from 30.
    Age15,
    Ethnicity,
    /// Deprivation quintile.
    Dep,
    /// Any of the three medication flags.
    Meds,
}

impl FromStr for StratifyKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "age15" => Ok(Self::Age15),
            "ethnicity" => Ok(Self::Ethnicity),
            "dep" => Ok(Self::Dep),
            "meds" => Ok(Self::Meds),
            other => Err(format!("unknown stratification {other:?} (expected age15, ethnicity, dep or meds)")),
        }
    }
}

impl fmt::Display for StratifyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Age15 => "age15",
            Self::Ethnicity => "ethnicity",
            Self::Dep => "dep",
            Self::Meds => "meds",
        })
    }
}

impl StratifyKey {
    pub fn stratum(self, p: &Person) -> String {
        match self {
            Self::Age15 => {
                let lo = 30 + 15 * ((p.age_years.max(30.0) - 30.0) / 15.0).floor() as i64;
                format!("{lo}-{}", lo + 14)
            }
            Self::Ethnicity => p.ethnicity.code().to_owned(),
            Self::Dep => format!("q{}", p.dep_quintile),
            Self::Meds => {
                if p.bp_lowering || p.lipid_lowering || p.antiplatelet_anticoagulant {
                    "on_medication".into()
                } else {
                    "no_medication".into()
                }
            }
        }
    }

    /// Person indices per stratum, in stratum order.
    pub fn groups(self, persons: &[Person]) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, p) in persons.iter().enumerate() {
            out.entry(self.stratum(p)).or_default().push(i);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use deepcox::cohort::Sex;

    #[test]
    fn age_bands() {
        let band = |a| StratifyKey::Age15.stratum(&Person::reference("x", Sex::F, a));
        assert_eq!(band(30.0), "30-44");
        assert_eq!(band(44.99), "30-44");
        assert_eq!(band(45.0), "45-59");
        assert_eq!(band(74.9), "60-74");
    }

    #[test]
    fn parse_round_trip() {
        for k in ["age15", "ethnicity", "dep", "meds"] {
            assert_eq!(k.parse::<StratifyKey>().unwrap().to_string(), k);
        }
        assert!("sex".parse::<StratifyKey>().is_err());
    }
}
