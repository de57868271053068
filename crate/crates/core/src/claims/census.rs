use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{BeneficiaryTimeline, CountyStats};

/// Maps each beneficiary to the county stats of their most recent inpatient
/// claim. Beneficiaries without a match get the unknown-county sentinel.
pub fn join_census(timelines: &[BeneficiaryTimeline], counties: &[CountyStats]) -> BTreeMap<String, CountyStats> {
    let by_key: HashMap<(&str, &str), &CountyStats> = counties.iter().map(|c| (c.key(), c)).collect();
    let names: BTreeSet<&str> = counties.iter().flat_map(|c| c.indicators.keys().map(String::as_str)).collect();
    let sentinel = CountyStats::unknown(names.iter().copied());
    timelines
        .iter()
        .map(|tl| {
            let stats = tl
                .inpatient_claims()
                .last()
                .and_then(|c| by_key.get(&(c.county_id.as_str(), c.state_id.as_str())))
                .map(|c| (*c).clone())
                .unwrap_or_else(|| sentinel.clone());
            (tl.id().to_string(), stats)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::{beneficiary, claim};
    use super::super::ClaimType;
    use super::*;

    fn county(id: &str, obesity: f64) -> CountyStats {
        CountyStats {
            county_id: id.into(),
            state_id: "10".into(),
            indicators: [("obesity_rate".to_string(), Some(obesity)), ("median_income".to_string(), Some(50000.0))]
                .into_iter()
                .collect(),
        }
    }

    #[test]
    fn exact_join() {
        let tl = BeneficiaryTimeline::new(beneficiary("b1"), vec![claim("i1", "b1", ClaimType::Inp, 5, Some(8))])
            .unwrap();
        let out = join_census(&[tl], &[county("001", 0.3), county("002", 0.4)]);
        assert_eq!(out["b1"], county("001", 0.3));
    }

    #[test]
    fn missing_county_degrades_to_sentinel() {
        let mut c = claim("i1", "b1", ClaimType::Inp, 5, Some(8));
        c.county_id = "999".into();
        let tl = BeneficiaryTimeline::new(beneficiary("b1"), vec![c]).unwrap();
        let out = join_census(&[tl], &[county("001", 0.3)]);
        assert!(out["b1"].is_unknown());
        assert_eq!(out["b1"].indicators.len(), 2);
    }

    #[test]
    fn most_recent_inpatient_claim_wins() {
        let mut early = claim("i1", "b1", ClaimType::Inp, 5, Some(8));
        early.county_id = "001".into();
        let mut late = claim("i2", "b1", ClaimType::Inp, 50, Some(52));
        late.county_id = "002".into();
        let mut outpatient = claim("o1", "b1", ClaimType::Out, 90, None);
        outpatient.county_id = "001".into();
        let tl = BeneficiaryTimeline::new(beneficiary("b1"), vec![late, outpatient, early]).unwrap();
        let out = join_census(&[tl], &[county("001", 0.3), county("002", 0.4)]);
        assert_eq!(out["b1"].county_id, "002");
    }
}
