//! Multi-set private set intersection.
//!
//! The server holds `N` keyword sets (documents) and a long-term key `s`. In
//! a one-time precomputation it publishes a tag collection
//! `{ H(i ‖ Ĥ(y)^s) : i ∈ [N], y ∈ d_i }`. Online, a client blinds its
//! keywords with a fresh `c`, the server raises every element to `s`, and
//! the client unblinds to obtain the pretags `Ĥ(x)^s`. Hashing each pretag
//! with every document index and probing the collection yields the
//! per-document intersection sizes.

pub mod baseline;

use std::collections::{BTreeSet, HashMap, HashSet};

use rand_core::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::crypto::{hash_bytes, hash_to_group, Domain, GroupElement, Scalar, ELEMENT_SIZE};
use crate::error::MspsiError;

/// Bytes of a truncated tag.
pub const TAG_SIZE: usize = 16;

/// Magic prefix of a serialized [`TagCollection`].
pub const TAG_COLLECTION_MAGIC: &[u8; 6] = b"MSPSI1";

pub type Keyword = Vec<u8>;

/// Instrumented operation counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    /// Group exponentiations.
    pub exponentiations: u64,
    /// Evaluations of Ĥ (keyword to group element).
    pub group_hashes: u64,
    /// Evaluations of the tag hash H.
    pub tag_hashes: u64,
}

impl OpCounts {
    pub fn add(&mut self, other: &OpCounts) {
        self.exponentiations += other.exponentiations;
        self.group_hashes += other.group_hashes;
        self.tag_hashes += other.tag_hashes;
    }
}

/// An ordered list of documents, each a set of keywords. Document `i` (1-based)
/// is `docs[i - 1]`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    docs: Vec<BTreeSet<Keyword>>,
}

impl Corpus {
    pub fn new<D, K>(docs: D) -> Self
    where
        D: IntoIterator,
        D::Item: IntoIterator<Item = K>,
        K: Into<Keyword>,
    {
        Corpus {
            docs: docs
                .into_iter()
                .map(|d| d.into_iter().map(Into::into).collect())
                .collect(),
        }
    }

    pub fn docs(&self) -> &[BTreeSet<Keyword>] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// S, the total number of (document, keyword) pairs.
    pub fn total_elements(&self) -> usize {
        self.docs.iter().map(BTreeSet::len).sum()
    }
}

/// The server's long-term MS-PSI secret `s`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerKey(Scalar);

impl ServerKey {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        ServerKey(Scalar::random_nonzero(rng))
    }

    pub fn from_scalar(s: Scalar) -> Result<Self, MspsiError> {
        if s.is_zero() {
            return Err(crate::error::CryptoError::ZeroScalar.into());
        }
        Ok(ServerKey(s))
    }

    pub fn scalar(&self) -> &Scalar {
        &self.0
    }
}

/// A truncated tag `H(i ‖ pretag)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag(pub [u8; TAG_SIZE]);

impl AsRef<[u8]> for Tag {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

/// Tag of a pretag for document `index` (1-based), index encoded as 8-byte big-endian.
pub fn document_tag(index: u64, pretag: &GroupElement) -> Tag {
    encoded_document_tag(index, &pretag.to_bytes())
}

/// [`document_tag`] from an already serialized pretag. Point encoding costs
/// far more than the hash, so loops over documents encode once.
pub fn encoded_document_tag(index: u64, pretag: &[u8; ELEMENT_SIZE]) -> Tag {
    let digest = hash_bytes(Domain::Tag, &[&index.to_be_bytes()[..], &pretag[..]]);
    let mut tag = [0u8; TAG_SIZE];
    tag.copy_from_slice(&digest[..TAG_SIZE]);
    Tag(tag)
}

/// Anything a client can probe for tag membership: the raw collection or a
/// compressed filter.
pub trait TagMembership {
    fn contains_tag(&self, tag: &Tag) -> bool;
}

/// The published per-document tags, stored sorted for canonical encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagCollection {
    tags: Vec<Tag>,
    doc_count: u64,
    total: u64,
}

impl TagCollection {
    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// N.
    pub fn doc_count(&self) -> u64 {
        self.doc_count
    }

    /// S.
    pub fn total_elements(&self) -> u64 {
        self.total
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(30 + self.tags.len() * TAG_SIZE);
        out.extend_from_slice(TAG_COLLECTION_MAGIC);
        out.extend_from_slice(&(ELEMENT_SIZE as u32).to_be_bytes());
        out.extend_from_slice(&(TAG_SIZE as u32).to_be_bytes());
        out.extend_from_slice(&self.doc_count.to_be_bytes());
        out.extend_from_slice(&self.total.to_be_bytes());
        for t in &self.tags {
            out.extend_from_slice(&t.0);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MspsiError> {
        const HEADER: usize = 6 + 4 + 4 + 8 + 8;
        if bytes.len() < HEADER || &bytes[..6] != TAG_COLLECTION_MAGIC {
            return Err(MspsiError::MalformedCollection("bad header"));
        }
        let word = |at: usize| u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let long = |at: usize| u64::from_be_bytes(bytes[at..at + 8].try_into().unwrap());
        if word(6) != ELEMENT_SIZE || word(10) != TAG_SIZE {
            return Err(MspsiError::MalformedCollection("unsupported sizes"));
        }
        let body = &bytes[HEADER..];
        if body.len() % TAG_SIZE != 0 {
            return Err(MspsiError::MalformedCollection("truncated tag"));
        }
        let tags: Vec<Tag> = body
            .chunks_exact(TAG_SIZE)
            .map(|c| Tag(c.try_into().unwrap()))
            .collect();
        if tags.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MspsiError::MalformedCollection("tags not strictly sorted"));
        }
        Ok(TagCollection {
            tags,
            doc_count: long(14),
            total: long(22),
        })
    }
}

impl TagMembership for TagCollection {
    fn contains_tag(&self, tag: &Tag) -> bool {
        self.tags.binary_search(tag).is_ok()
    }
}

impl TagMembership for HashSet<Tag> {
    fn contains_tag(&self, tag: &Tag) -> bool {
        self.contains(tag)
    }
}

/// Precomputation: the tag collection for `corpus` under `key`.
pub fn precompute(corpus: &Corpus, key: &ServerKey) -> Result<TagCollection, MspsiError> {
    precompute_counted(corpus, key, &mut OpCounts::default())
}

/// [`precompute`] with operation counting. A keyword shared by several
/// documents costs one Ĥ evaluation and one exponentiation in total.
pub fn precompute_counted(
    corpus: &Corpus,
    key: &ServerKey,
    counts: &mut OpCounts,
) -> Result<TagCollection, MspsiError> {
    if corpus.is_empty() {
        return Err(MspsiError::EmptyCorpus);
    }
    let mut pretags: HashMap<&[u8], [u8; ELEMENT_SIZE]> = HashMap::new();
    let mut tags = Vec::with_capacity(corpus.total_elements());
    for (i, doc) in corpus.docs().iter().enumerate() {
        let index = i as u64 + 1;
        for kw in doc {
            let pretag = *pretags.entry(kw.as_slice()).or_insert_with(|| {
                counts.group_hashes += 1;
                counts.exponentiations += 1;
                hash_to_group(kw).pow(key.scalar()).to_bytes()
            });
            counts.tag_hashes += 1;
            tags.push(encoded_document_tag(index, &pretag));
        }
    }
    tags.sort_unstable();
    tags.dedup();
    Ok(TagCollection {
        tags,
        doc_count: corpus.len() as u64,
        total: corpus.total_elements() as u64,
    })
}

/// The client's blinded keywords `Ĥ(x_i)^c`, in query order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlindedQuery {
    pub elements: Vec<GroupElement>,
}

/// The server's reply `x̃_i^s`, in query order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplyElements {
    pub elements: Vec<GroupElement>,
}

macro_rules! element_list_codec {
    ($ty:ident) => {
        impl $ty {
            pub fn len(&self) -> usize {
                self.elements.len()
            }

            pub fn is_empty(&self) -> bool {
                self.elements.is_empty()
            }

            /// Concatenated fixed-size element encodings.
            pub fn to_bytes(&self) -> Vec<u8> {
                self.elements.iter().flat_map(|e| e.to_bytes()).collect()
            }

            /// Rejects the whole list if any element fails to decode.
            pub fn from_bytes(bytes: &[u8]) -> Result<Self, MspsiError> {
                if bytes.len() % ELEMENT_SIZE != 0 {
                    return Err(MspsiError::MalformedElement(bytes.len() / ELEMENT_SIZE));
                }
                let elements = bytes
                    .chunks_exact(ELEMENT_SIZE)
                    .enumerate()
                    .map(|(i, c)| GroupElement::from_bytes(c).map_err(|_| MspsiError::MalformedElement(i)))
                    .collect::<Result<_, _>>()?;
                Ok($ty { elements })
            }
        }
    };
}

element_list_codec!(BlindedQuery);
element_list_codec!(ReplyElements);

/// Client-side state of one outstanding query. Never leaves the device.
#[derive(Clone, Debug)]
pub struct QuerySecret {
    blinding: Scalar,
    keywords: Vec<Keyword>,
    real_count: usize,
}

impl QuerySecret {
    pub fn keywords(&self) -> &[Keyword] {
        &self.keywords
    }

    /// Number of leading keywords that are real; the rest are padding.
    pub fn real_count(&self) -> usize {
        self.real_count
    }

    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    /// Serializable form for the querier's own persistent state.
    pub fn to_parts(&self) -> (Scalar, Vec<Keyword>, usize) {
        (self.blinding, self.keywords.clone(), self.real_count)
    }

    pub fn from_parts(blinding: Scalar, keywords: Vec<Keyword>, real_count: usize) -> Result<Self, MspsiError> {
        if blinding.is_zero() {
            return Err(crate::error::CryptoError::ZeroScalar.into());
        }
        if keywords.is_empty() || real_count == 0 || real_count > keywords.len() {
            return Err(MspsiError::EmptyQuery);
        }
        Ok(QuerySecret { blinding, keywords, real_count })
    }
}

/// Blinds the client's keywords with a fresh non-zero factor.
pub fn blind<R: RngCore + CryptoRng>(
    keywords: &[Keyword],
    rng: &mut R,
) -> Result<(BlindedQuery, QuerySecret), MspsiError> {
    blind_counted(keywords, keywords.len(), rng, &mut OpCounts::default())
}

/// Blinds `real` keywords padded with fresh 32-byte random keywords up to
/// `pad_to` entries. Real keywords come first.
pub fn blind_padded<R: RngCore + CryptoRng>(
    real: &[Keyword],
    pad_to: usize,
    rng: &mut R,
) -> Result<(BlindedQuery, QuerySecret), MspsiError> {
    let mut keywords = real.to_vec();
    while keywords.len() < pad_to {
        let mut pad = vec![0u8; 32];
        rng.fill_bytes(&mut pad);
        keywords.push(pad);
    }
    blind_counted(&keywords, real.len(), rng, &mut OpCounts::default())
}

/// Blinds `keywords`, of which the first `real_count` are real.
pub fn blind_counted<R: RngCore + CryptoRng>(
    keywords: &[Keyword],
    real_count: usize,
    rng: &mut R,
    counts: &mut OpCounts,
) -> Result<(BlindedQuery, QuerySecret), MspsiError> {
    if keywords.is_empty() || real_count == 0 {
        return Err(MspsiError::EmptyQuery);
    }
    let mut seen = HashSet::with_capacity(keywords.len());
    if !keywords.iter().all(|k| seen.insert(k.as_slice())) {
        return Err(MspsiError::DuplicateKeyword);
    }
    let blinding = Scalar::random_nonzero(rng);
    let elements = keywords
        .iter()
        .map(|kw| {
            counts.group_hashes += 1;
            counts.exponentiations += 1;
            hash_to_group(kw).pow(&blinding)
        })
        .collect();
    Ok((
        BlindedQuery { elements },
        QuerySecret {
            blinding,
            keywords: keywords.to_vec(),
            real_count: real_count.min(keywords.len()),
        },
    ))
}

/// Server online phase: raise each blinded element to `s`, preserving order.
pub fn reply(query: &BlindedQuery, key: &ServerKey) -> ReplyElements {
    reply_counted(query, key, &mut OpCounts::default())
}

pub fn reply_counted(query: &BlindedQuery, key: &ServerKey, counts: &mut OpCounts) -> ReplyElements {
    counts.exponentiations += query.elements.len() as u64;
    ReplyElements {
        elements: query.elements.iter().map(|e| e.pow(key.scalar())).collect(),
    }
}

/// Per-document intersection sizes and the number of documents matching
/// every real keyword.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntersectionResult {
    /// `sizes[d - 1]` is `I_d`.
    pub sizes: Vec<usize>,
    pub matches: usize,
}

/// Unblinds the reply into pretags, one per real keyword.
pub fn unblind(
    reply: &ReplyElements,
    secret: &QuerySecret,
    counts: &mut OpCounts,
) -> Result<Vec<GroupElement>, MspsiError> {
    if reply.len() != secret.len() {
        return Err(MspsiError::LengthMismatch {
            expected: secret.len(),
            got: reply.len(),
        });
    }
    let inverse = secret.blinding.invert()?;
    Ok(reply.elements[..secret.real_count]
        .iter()
        .map(|e| {
            counts.exponentiations += 1;
            e.pow(&inverse)
        })
        .collect())
}

/// Client processing against the raw tag collection.
pub fn process(
    reply: &ReplyElements,
    secret: &QuerySecret,
    tc: &TagCollection,
) -> Result<IntersectionResult, MspsiError> {
    process_counted(reply, secret, tc, tc.doc_count(), &mut OpCounts::default())
}

/// Client processing against any tag membership structure covering
/// `doc_count` documents. Only real keywords are probed.
pub fn process_counted<M: TagMembership + ?Sized>(
    reply: &ReplyElements,
    secret: &QuerySecret,
    tags: &M,
    doc_count: u64,
    counts: &mut OpCounts,
) -> Result<IntersectionResult, MspsiError> {
    let pretags: Vec<[u8; ELEMENT_SIZE]> = unblind(reply, secret, counts)?.iter().map(GroupElement::to_bytes).collect();
    let mut sizes = Vec::with_capacity(doc_count as usize);
    for d in 1..=doc_count {
        let hits = pretags
            .iter()
            .filter(|p| {
                counts.tag_hashes += 1;
                tags.contains_tag(&encoded_document_tag(d, p))
            })
            .count();
        sizes.push(hits);
    }
    let matches = sizes.iter().filter(|&&s| s == secret.real_count).count();
    Ok(IntersectionResult { sizes, matches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn kw(s: &str) -> Keyword {
        s.as_bytes().to_vec()
    }

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(11)
    }

    #[test]
    fn single_document_single_tag() {
        let mut r = rng();
        let key = ServerKey::generate(&mut r);
        let tc = precompute(&Corpus::new(vec![vec!["a"]]), &key).unwrap();
        assert_eq!(tc.len(), 1);
        let expect = document_tag(1, &hash_to_group(b"a").pow(key.scalar()));
        assert_eq!(tc.tags(), &[expect]);
    }

    #[test]
    fn shared_keyword_reuses_pretag() {
        let mut r = rng();
        let key = ServerKey::generate(&mut r);
        let mut counts = OpCounts::default();
        let tc = precompute_counted(&Corpus::new(vec![vec!["a"], vec!["a"]]), &key, &mut counts).unwrap();
        assert_eq!(tc.len(), 2);
        assert_eq!(counts.exponentiations, 1);
        assert_eq!(counts.tag_hashes, 2);
        // distinct document indices diversify the tags
        assert_ne!(tc.tags()[0], tc.tags()[1]);
    }

    #[test]
    fn empty_corpus_rejected_and_empty_document_allowed() {
        let mut r = rng();
        let key = ServerKey::generate(&mut r);
        assert_eq!(precompute(&Corpus::default(), &key), Err(MspsiError::EmptyCorpus));
        let corpus = Corpus::new(vec![Vec::<&str>::new(), vec!["x"]]);
        let tc = precompute(&corpus, &key).unwrap();
        assert_eq!(tc.len(), 1);
        let (q, sec) = blind(&[kw("x")], &mut r).unwrap();
        let res = process(&reply(&q, &key), &sec, &tc).unwrap();
        assert_eq!(res.sizes, vec![0, 1]);
    }

    #[test]
    fn blind_is_fresh_and_rejects_duplicates() {
        let mut r = rng();
        let kws = vec![kw("a"), kw("b")];
        let (q1, _) = blind(&kws, &mut r).unwrap();
        let (q2, _) = blind(&kws, &mut r).unwrap();
        assert_ne!(q1, q2);
        assert_eq!(blind(&[kw("a"), kw("a")], &mut r).unwrap_err(), MspsiError::DuplicateKeyword);
        assert_eq!(blind(&[], &mut r).unwrap_err(), MspsiError::EmptyQuery);
    }

    #[test]
    fn query_of_ten_is_320_bytes() {
        let mut r = rng();
        let kws: Vec<_> = (0..10).map(|i| format!("k{i}").into_bytes()).collect();
        let (q, _) = blind(&kws, &mut r).unwrap();
        assert_eq!(q.to_bytes().len(), 320);
        let key = ServerKey::generate(&mut r);
        assert_eq!(q.to_bytes().len() + reply(&q, &key).to_bytes().len(), 640);
    }

    #[test]
    fn reply_counts_and_determinism() {
        let mut r = rng();
        let key = ServerKey::generate(&mut r);
        let kws: Vec<_> = (0..10).map(|i| format!("k{i}").into_bytes()).collect();
        let (q, _) = blind(&kws, &mut r).unwrap();
        let mut counts = OpCounts::default();
        let a = reply_counted(&q, &key, &mut counts);
        assert_eq!(counts.exponentiations, 10);
        assert_eq!(a.to_bytes(), reply(&q, &key).to_bytes());
        let empty = reply(&BlindedQuery { elements: vec![] }, &key);
        assert!(empty.is_empty());
    }

    #[test]
    fn malformed_query_bytes_rejected() {
        let mut bytes = vec![0u8; 64];
        bytes[32..].copy_from_slice(&[0xffu8; 32]);
        assert_eq!(BlindedQuery::from_bytes(&bytes), Err(MspsiError::MalformedElement(1)));
        assert!(BlindedQuery::from_bytes(&[0u8; 33]).is_err());
    }

    #[test]
    fn worked_example_matches_brute_force() {
        let mut r = rng();
        let key = ServerKey::generate(&mut r);
        let corpus = Corpus::new(vec![vec!["a", "c"], vec!["b"], vec!["a", "b"]]);
        let tc = precompute(&corpus, &key).unwrap();
        let (q, sec) = blind(&[kw("a"), kw("b")], &mut r).unwrap();
        let res = process(&reply(&q, &key), &sec, &tc).unwrap();
        assert_eq!(res.sizes, vec![1, 1, 2]);
        assert_eq!(res.matches, 1);
    }

    #[test]
    fn disjoint_query_matches_nothing() {
        let mut r = rng();
        let key = ServerKey::generate(&mut r);
        let tc = precompute(&Corpus::new(vec![vec!["a"], vec!["b"]]), &key).unwrap();
        let (q, sec) = blind(&[kw("z")], &mut r).unwrap();
        let res = process(&reply(&q, &key), &sec, &tc).unwrap();
        assert_eq!(res, IntersectionResult { sizes: vec![0, 0], matches: 0 });
    }

    #[test]
    fn padding_does_not_block_matches() {
        let mut r = rng();
        let key = ServerKey::generate(&mut r);
        let tc = precompute(&Corpus::new(vec![vec!["a", "b", "c"], vec!["a"]]), &key).unwrap();
        let (q, sec) = blind_padded(&[kw("a"), kw("b")], 10, &mut r).unwrap();
        assert_eq!(q.len(), 10);
        assert_eq!(sec.real_count(), 2);
        let res = process(&reply(&q, &key), &sec, &tc).unwrap();
        assert_eq!(res.sizes, vec![2, 1]);
        assert_eq!(res.matches, 1);
    }

    #[test]
    fn process_rejects_length_mismatch() {
        let mut r = rng();
        let key = ServerKey::generate(&mut r);
        let tc = precompute(&Corpus::new(vec![vec!["a"]]), &key).unwrap();
        let (q, sec) = blind(&[kw("a"), kw("b")], &mut r).unwrap();
        let mut rep = reply(&q, &key);
        rep.elements.pop();
        assert_eq!(
            process(&rep, &sec, &tc),
            Err(MspsiError::LengthMismatch { expected: 2, got: 1 })
        );
    }

    #[test]
    fn process_counts_tag_hashes() {
        let mut r = rng();
        let key = ServerKey::generate(&mut r);
        let docs: Vec<Vec<String>> = (0..1000).map(|i| vec![format!("d{i}")]).collect();
        let tc = precompute(&Corpus::new(docs), &key).unwrap();
        let kws: Vec<_> = (0..10).map(|i| format!("q{i}").into_bytes()).collect();
        let mut counts = OpCounts::default();
        let (q, sec) = blind_counted(&kws, 10, &mut r, &mut counts).unwrap();
        let rep = reply(&q, &key);
        process_counted(&rep, &sec, &tc, tc.doc_count(), &mut counts).unwrap();
        assert_eq!(counts.exponentiations, 20);
        assert_eq!(counts.tag_hashes, 10_000);
    }

    #[test]
    fn collection_encoding_roundtrips_and_is_canonical() {
        let mut r = rng();
        let key = ServerKey::generate(&mut r);
        let tc = precompute(&Corpus::new(vec![vec!["a", "b"], vec!["c"]]), &key).unwrap();
        let bytes = tc.to_bytes();
        assert_eq!(&bytes[..6], b"MSPSI1");
        assert_eq!(TagCollection::from_bytes(&bytes).unwrap(), tc);
        let mut swapped = bytes.clone();
        let n = swapped.len();
        swapped[n - 16..].copy_from_slice(&bytes[30..46]);
        swapped[30..46].copy_from_slice(&bytes[n - 16..]);
        assert!(TagCollection::from_bytes(&swapped).is_err());
    }
}
