use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{DomainDataset, Sample};
use crate::error::{Error, Result};
use crate::label::{AttackType, Class};
use crate::seed::{rng_for, stream};

/// The face datasets the protocols are defined over. `Casia` and `Cefa`
/// share the letter C in their own protocols.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Msu,
    Casia,
    Replay,
    Oulu,
    Wmca,
    Cefa,
    Surf,
    CelebaSpoof,
}

impl Domain {
    pub const ALL: [Domain; 8] = [
        Domain::Msu,
        Domain::Casia,
        Domain::Replay,
        Domain::Oulu,
        Domain::Wmca,
        Domain::Cefa,
        Domain::Surf,
        Domain::CelebaSpoof,
    ];

    /// Directory name under the datasets root.
    pub fn id(self) -> &'static str {
        match self {
            Domain::Msu => "msu",
            Domain::Casia => "casia",
            Domain::Replay => "replay",
            Domain::Oulu => "oulu",
            Domain::Wmca => "wmca",
            Domain::Cefa => "cefa",
            Domain::Surf => "surf",
            Domain::CelebaSpoof => "celeba-spoof",
        }
    }

    pub fn letter(self) -> &'static str {
        match self {
            Domain::Msu => "M",
            Domain::Casia | Domain::Cefa => "C",
            Domain::Replay => "I",
            Domain::Oulu => "O",
            Domain::Wmca => "W",
            Domain::Surf => "S",
            Domain::CelebaSpoof => "CelebA-Spoof",
        }
    }

    pub fn full_name(self) -> &'static str {
        match self {
            Domain::Msu => "MSU-MFSD",
            Domain::Casia => "CASIA-MFSD",
            Domain::Replay => "Idiap Replay-Attack",
            Domain::Oulu => "OULU-NPU",
            Domain::Wmca => "WMCA",
            Domain::Cefa => "CASIA-CeFA",
            Domain::Surf => "CASIA-SURF",
            Domain::CelebaSpoof => "CelebA-Spoof",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        Domain::ALL
            .into_iter()
            .find(|d| d.id() == t)
            .ok_or_else(|| Error::UnknownDomain(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProtocolId {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
    #[serde(rename = "unseen-spoof")]
    UnseenSpoof,
}

impl ProtocolId {
    pub const ALL: [ProtocolId; 4] = [
        ProtocolId::One,
        ProtocolId::Two,
        ProtocolId::Three,
        ProtocolId::UnseenSpoof,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolId::One => "1",
            ProtocolId::Two => "2",
            ProtocolId::Three => "3",
            ProtocolId::UnseenSpoof => "unseen-spoof",
        }
    }

    /// Per-domain batch size used with this protocol.
    pub fn default_per_domain(self) -> usize {
        match self {
            ProtocolId::Two => 8,
            _ => 3,
        }
    }

    /// Every split of this protocol, in table order.
    pub fn splits(self) -> Vec<ProtocolSpec> {
        use Domain::*;
        let lodo = |pool: &[Domain], order: &[(&[Domain], Domain)]| {
            debug_assert!(order.iter().all(|(s, t)| pool.contains(t) && s.len() + 1 == pool.len()));
            order
                .iter()
                .map(|(sources, target)| ProtocolSpec {
                    protocol: self,
                    sources: sources.to_vec(),
                    target: SplitTarget::Domain(*target),
                })
                .collect()
        };
        match self {
            ProtocolId::One => lodo(
                &[Msu, Casia, Replay, Oulu],
                &[
                    (&[Oulu, Casia, Replay], Msu),
                    (&[Oulu, Msu, Replay], Casia),
                    (&[Oulu, Casia, Msu], Replay),
                    (&[Replay, Casia, Msu], Oulu),
                ],
            ),
            ProtocolId::Two => lodo(
                &[Wmca, Cefa, Surf],
                &[(&[Cefa, Surf], Wmca), (&[Surf, Wmca], Cefa), (&[Cefa, Wmca], Surf)],
            ),
            ProtocolId::Three => {
                let pool = [Casia, Replay, Msu, Oulu];
                let mut out = Vec::new();
                for s in pool {
                    let mut targets: Vec<Domain> = pool.into_iter().filter(|t| *t != s).collect();
                    targets.sort_by_key(|t| t.letter());
                    for t in targets {
                        out.push(ProtocolSpec {
                            protocol: self,
                            sources: vec![s],
                            target: SplitTarget::Domain(t),
                        });
                    }
                }
                out
            }
            ProtocolId::UnseenSpoof => [AttackType::Replay, AttackType::Print]
                .into_iter()
                .map(|a| ProtocolSpec {
                    protocol: self,
                    sources: vec![Msu, Casia, Replay, Oulu],
                    target: SplitTarget::Attack(a),
                })
                .collect(),
        }
    }

    /// Finds a split by its display name (`OCI→M`, `C->I`) or by its
    /// target (`M`, `msu`, `replay`).
    pub fn find(self, key: &str) -> Result<ProtocolSpec> {
        let norm = |s: &str| s.trim().replace("->", "→").replace(' ', "").to_ascii_lowercase();
        let key_n = norm(key);
        let splits = self.splits();
        let by_name = splits.iter().find(|s| norm(&s.name()) == key_n);
        let by_target = || {
            let hits: Vec<&ProtocolSpec> = splits
                .iter()
                .filter(|s| match s.target {
                    SplitTarget::Domain(d) => {
                        d.letter().to_ascii_lowercase() == key_n || d.id() == key_n
                    }
                    SplitTarget::Attack(a) => a.name() == key_n,
                })
                .collect();
            (hits.len() == 1).then(|| hits[0])
        };
        by_name
            .or_else(by_target)
            .cloned()
            .ok_or_else(|| Error::Protocol(format!("protocol {} has no split `{key}`", self.name())))
    }
}

impl fmt::Display for ProtocolId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "p1" => Ok(ProtocolId::One),
            "2" | "p2" => Ok(ProtocolId::Two),
            "3" | "p3" => Ok(ProtocolId::Three),
            "unseen-spoof" | "unseen" => Ok(ProtocolId::UnseenSpoof),
            _ => Err(Error::UnknownProtocol(s.to_string())),
        }
    }
}

/// What a split holds out: a whole domain, or one attack type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitTarget {
    Domain(Domain),
    Attack(AttackType),
}

/// Composition of one split, before any data is loaded.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ProtocolSpec {
    pub protocol: ProtocolId,
    pub sources: Vec<Domain>,
    pub target: SplitTarget,
}

impl ProtocolSpec {
    /// Short name: `OCI→M`, `C→I`, or `Replay`.
    pub fn name(&self) -> String {
        match self.target {
            SplitTarget::Domain(t) => {
                let src: String = self.sources.iter().map(|d| d.letter()).collect();
                format!("{src}→{}", t.letter())
            }
            SplitTarget::Attack(a) => {
                let n = a.name();
                format!("{}{}", n[..1].to_ascii_uppercase(), &n[1..])
            }
        }
    }

    pub fn describe(&self) -> String {
        let names: Vec<&str> = self.sources.iter().map(|d| d.full_name()).collect();
        match self.target {
            SplitTarget::Domain(t) => format!(
                "protocol {}: train on {} ; test on {}",
                self.protocol,
                names.join(", "),
                t.full_name()
            ),
            SplitTarget::Attack(a) => {
                let seen: Vec<&str> = [AttackType::Print, AttackType::Replay]
                    .into_iter()
                    .filter(|x| *x != a)
                    .map(|x| x.name())
                    .collect();
                format!(
                    "protocol {}: pool {} and split each group 80/20 ; train on real+{} ; test on real+{}",
                    self.protocol,
                    names.join(", "),
                    seen.join("+"),
                    a.name()
                )
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Protocol("a split needs at least one source domain".into()));
        }
        let unique: HashSet<_> = self.sources.iter().collect();
        if unique.len() != self.sources.len() {
            return Err(Error::Protocol(format!("{}: repeated source domain", self.name())));
        }
        match self.target {
            SplitTarget::Domain(t) if self.sources.contains(&t) => Err(Error::Protocol(format!(
                "target {t} is also listed as a source"
            ))),
            SplitTarget::Attack(AttackType::None) => {
                Err(Error::Protocol("the held-out attack type cannot be `none`".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Something that can produce the sample list of a domain.
pub trait DomainSource {
    fn domain(&self, d: Domain) -> Result<DomainDataset>;
}

/// Domains laid out as `<root>/<domain id>/manifest.csv`.
#[derive(Clone, Debug)]
pub struct DataRoot(pub PathBuf);

impl DomainSource for DataRoot {
    fn domain(&self, d: Domain) -> Result<DomainDataset> {
        let dir = self.0.join(d.id());
        if !dir.is_dir() {
            return Err(Error::UnknownDomain(format!(
                "{d}: no dataset directory at {}",
                dir.display()
            )));
        }
        DomainDataset::load(d.id(), &dir)
    }
}

impl DomainSource for HashMap<Domain, DomainDataset> {
    fn domain(&self, d: Domain) -> Result<DomainDataset> {
        self.get(&d)
            .cloned()
            .ok_or_else(|| Error::UnknownDomain(format!("{d} is not registered")))
    }
}

/// Train and test pools of one protocol split.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolSplit {
    pub spec: ProtocolSpec,
    pub sources: Vec<DomainDataset>,
    /// The test pool.
    pub target: DomainDataset,
    pub supplementary: Option<DomainDataset>,
    /// Labeled target samples moved into training.
    pub few_shot: Option<DomainDataset>,
    pub shots: usize,
    pub seed: u64,
}

impl ProtocolSplit {
    pub fn name(&self) -> String {
        self.spec.name()
    }

    /// Every domain the sampler draws from, each with its own quota.
    pub fn train_domains(&self) -> Vec<&DomainDataset> {
        self.sources
            .iter()
            .chain(&self.supplementary)
            .chain(&self.few_shot)
            .collect()
    }

    pub fn train_samples(&self) -> impl Iterator<Item = &Sample> {
        self.train_domains().into_iter().flat_map(|d| d.samples.iter())
    }

    pub fn test_samples(&self) -> &[Sample] {
        &self.target.samples
    }

    /// Train and test pools share no sample identifier.
    pub fn check_disjoint(&self) -> Result<()> {
        let train: HashSet<&str> = self.train_samples().map(|s| s.id.as_str()).collect();
        match self.target.samples.iter().find(|s| train.contains(s.id.as_str())) {
            Some(s) => Err(Error::Protocol(format!("sample {} is in both pools", s.id))),
            None => Ok(()),
        }
    }
}

/// Fraction of each group that goes to training in the unseen-attack split.
pub const UNSEEN_TRAIN_FRACTION: f64 = 0.8;

/// Builds the split described by `spec`, optionally adding the
/// supplementary domain and `shots` labeled target samples.
pub fn build_protocol(
    spec: &ProtocolSpec,
    source: &dyn DomainSource,
    shots: usize,
    supplementary: bool,
    seed: u64,
) -> Result<ProtocolSplit> {
    spec.validate()?;
    let (sources, target) = match spec.target {
        SplitTarget::Domain(t) => {
            let sources = spec
                .sources
                .iter()
                .map(|d| source.domain(*d))
                .collect::<Result<Vec<_>>>()?;
            (sources, source.domain(t)?)
        }
        SplitTarget::Attack(held_out) => unseen_attack_split(spec, source, held_out, seed)?,
    };
    for d in &sources {
        if d.is_empty() {
            return Err(Error::Protocol(format!("source domain {} has no samples", d.name)));
        }
    }
    if target.count(Class::Real) == 0 || target.count(Class::Spoof) == 0 {
        return Err(Error::Protocol(format!(
            "test pool {} needs both real and spoof samples",
            target.name
        )));
    }
    let supplementary = if supplementary {
        Some(source.domain(Domain::CelebaSpoof)?)
    } else {
        None
    };
    let split = ProtocolSplit {
        spec: spec.clone(),
        sources,
        target,
        supplementary,
        few_shot: None,
        shots: 0,
        seed,
    };
    let split = few_shot_inject(split, shots, &mut rng_for(seed, &[stream::FEW_SHOT]))?;
    split.check_disjoint()?;
    Ok(split)
}

fn unseen_attack_split(
    spec: &ProtocolSpec,
    source: &dyn DomainSource,
    held_out: AttackType,
    seed: u64,
) -> Result<(Vec<DomainDataset>, DomainDataset)> {
    let mut train_domains = Vec::new();
    let mut test = Vec::new();
    for (di, d) in spec.sources.iter().enumerate() {
        let ds = source.domain(*d)?;
        let mut train = Vec::new();
        for (gi, group) in [AttackType::None, AttackType::Print, AttackType::Replay]
            .into_iter()
            .enumerate()
        {
            let mut members: Vec<Sample> =
                ds.samples.iter().filter(|s| s.attack == group).cloned().collect();
            members.sort_by(|a, b| a.id.cmp(&b.id));
            members.shuffle(&mut rng_for(seed, &[stream::SPLIT, di as u64, gi as u64]));
            let cut = (members.len() as f64 * UNSEEN_TRAIN_FRACTION).round() as usize;
            let (tr, te) = members.split_at(cut);
            if group == AttackType::None {
                train.extend_from_slice(tr);
                test.extend_from_slice(te);
            } else if group == held_out {
                test.extend_from_slice(te);
            } else {
                train.extend_from_slice(tr);
            }
        }
        train_domains.push(DomainDataset::new(ds.name, train)?);
    }
    let target = DomainDataset::new(format!("unseen-{}", held_out.name()), test)?;
    Ok((train_domains, target))
}

/// Moves `k` labeled target samples into training: `⌈k/2⌉` of the class
/// that is rarer in the test pool and the rest of the other class, chosen
/// at random. `k = 0` returns the split unchanged.
pub fn few_shot_inject(mut split: ProtocolSplit, k: usize, rng: &mut impl Rng) -> Result<ProtocolSplit> {
    if k == 0 {
        return Ok(split);
    }
    let pool = &split.target;
    if k > pool.len() {
        return Err(Error::Protocol(format!(
            "{k} shots requested but the target has only {} samples",
            pool.len()
        )));
    }
    let real = pool.count(Class::Real);
    let spoof = pool.count(Class::Spoof);
    let rarer = match real.cmp(&spoof) {
        std::cmp::Ordering::Less => Class::Real,
        std::cmp::Ordering::Greater => Class::Spoof,
        std::cmp::Ordering::Equal => {
            if rng.random_bool(0.5) {
                Class::Real
            } else {
                Class::Spoof
            }
        }
    };
    let mut want = [0usize; 2];
    want[rarer.index()] = k.div_ceil(2);
    want[rarer.other().index()] = k / 2;
    for class in Class::ALL {
        if want[class.index()] > pool.count(class) {
            return Err(Error::Protocol(format!(
                "{k} shots need {} {class} target samples, only {} available",
                want[class.index()],
                pool.count(class)
            )));
        }
    }
    let mut chosen = HashSet::new();
    for class in Class::ALL {
        let mut idx: Vec<usize> = (0..pool.len()).filter(|&i| pool.samples[i].label == class).collect();
        idx.shuffle(rng);
        chosen.extend(idx.into_iter().take(want[class.index()]));
    }
    let (shots, rest): (Vec<_>, Vec<_>) = std::mem::take(&mut split.target.samples)
        .into_iter()
        .enumerate()
        .partition(|(i, _)| chosen.contains(i));
    split.target.samples = rest.into_iter().map(|(_, s)| s).collect();
    let mut shot_samples: Vec<Sample> = shots.into_iter().map(|(_, s)| s).collect();
    if let Some(existing) = split.few_shot.take() {
        shot_samples.extend(existing.samples);
    }
    split.few_shot = Some(DomainDataset::new(format!("{}-shots", split.target.name), shot_samples)?);
    split.shots += k;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fake_domain(d: Domain, n_real: usize, n_print: usize, n_replay: usize) -> DomainDataset {
        let mut samples = Vec::new();
        let groups = [
            (Class::Real, AttackType::None, n_real),
            (Class::Spoof, AttackType::Print, n_print),
            (Class::Spoof, AttackType::Replay, n_replay),
        ];
        for (label, attack, n) in groups {
            for i in 0..n {
                samples.push(Sample {
                    id: format!("{}/{}-{i}", d.id(), attack.name()),
                    path: PathBuf::from(format!("{}/{i}.png", d.id())),
                    label,
                    attack,
                    domain: d.id().into(),
                });
            }
        }
        DomainDataset::new(d.id(), samples).unwrap()
    }

    fn registry() -> HashMap<Domain, DomainDataset> {
        Domain::ALL.into_iter().map(|d| (d, fake_domain(d, 10, 6, 7))).collect()
    }

    #[test]
    fn protocol_sizes() {
        assert_eq!(ProtocolId::One.splits().len(), 4);
        assert_eq!(ProtocolId::Two.splits().len(), 3);
        assert_eq!(ProtocolId::Three.splits().len(), 12);
        assert_eq!(ProtocolId::UnseenSpoof.splits().len(), 2);
    }

    #[test]
    fn split_names_follow_table_headers() {
        let p1: Vec<String> = ProtocolId::One.splits().iter().map(|s| s.name()).collect();
        assert_eq!(p1, ["OCI→M", "OMI→C", "OCM→I", "ICM→O"]);
        let p2: Vec<String> = ProtocolId::Two.splits().iter().map(|s| s.name()).collect();
        assert_eq!(p2, ["CS→W", "SW→C", "CW→S"]);
        let p3: Vec<String> = ProtocolId::Three.splits().iter().map(|s| s.name()).collect();
        assert_eq!(
            p3,
            ["C→I", "C→M", "C→O", "I→C", "I→M", "I→O", "M→C", "M→I", "M→O", "O→C", "O→I", "O→M"]
        );
    }

    #[test]
    fn protocol_one_target_m_has_the_other_three_sources() {
        let spec = ProtocolId::One.find("M").unwrap();
        let mut letters: Vec<&str> = spec.sources.iter().map(|d| d.letter()).collect();
        letters.sort();
        assert_eq!(letters, ["C", "I", "O"]);
        assert_eq!(ProtocolId::Three.find("C->I").unwrap().name(), "C→I");
        assert!(ProtocolId::Three.find("M").is_err(), "ambiguous target");
    }

    #[test]
    fn target_among_sources_and_unknown_names_are_rejected() {
        let spec = ProtocolSpec {
            protocol: ProtocolId::One,
            sources: vec![Domain::Msu, Domain::Oulu],
            target: SplitTarget::Domain(Domain::Msu),
        };
        assert!(spec.validate().is_err());
        assert!("mars".parse::<Domain>().is_err());
        assert!("7".parse::<ProtocolId>().is_err());
        let reg: HashMap<Domain, DomainDataset> = HashMap::new();
        let spec = ProtocolId::One.find("M").unwrap();
        assert!(matches!(build_protocol(&spec, &reg, 0, false, 1), Err(Error::UnknownDomain(_))));
    }

    #[test]
    fn unseen_replay_split_separates_attack_types() {
        let reg = registry();
        let spec = ProtocolId::UnseenSpoof.find("replay").unwrap();
        let split = build_protocol(&spec, &reg, 0, false, 3).unwrap();
        assert!(split.train_samples().all(|s| s.attack != AttackType::Replay));
        assert!(split.train_samples().any(|s| s.attack == AttackType::Print));
        let test_attacks: HashSet<AttackType> = split
            .test_samples()
            .iter()
            .filter(|s| s.label == Class::Spoof)
            .map(|s| s.attack)
            .collect();
        assert_eq!(test_attacks, HashSet::from([AttackType::Replay]));
        // 10 real per domain: 8 train, 2 test.
        assert_eq!(split.target.count(Class::Real), 4 * 2);
        split.check_disjoint().unwrap();
    }

    #[test]
    fn five_shot_moves_exactly_five_samples() {
        let reg = registry();
        let spec = ProtocolId::One.find("M").unwrap();
        let zero = build_protocol(&spec, &reg, 0, false, 9).unwrap();
        let five = build_protocol(&spec, &reg, 5, false, 9).unwrap();
        assert_eq!(zero.target.len() - five.target.len(), 5);
        let shots = five.few_shot.as_ref().unwrap();
        assert_eq!(shots.len(), 5);
        // Real is the rarer class here (10 vs 13): it gets 3.
        assert_eq!(shots.count(Class::Real), 3);
        five.check_disjoint().unwrap();
    }

    #[test]
    fn zero_shots_leaves_the_split_alone() {
        let reg = registry();
        let split = build_protocol(&ProtocolId::Two.find("W").unwrap(), &reg, 0, true, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(few_shot_inject(split.clone(), 0, &mut rng).unwrap(), split);
        assert_eq!(split.train_domains().len(), 3);
    }

    #[test]
    fn too_many_shots_is_an_error() {
        let reg = registry();
        let spec = ProtocolId::One.find("M").unwrap();
        assert!(build_protocol(&spec, &reg, 24, false, 0).is_err());
    }
}
