//! Metadata descriptor encoder: turns each "attribute:rule" codebook entry
//! into a vector by embedding its two tokens, running a small transformer
//! encoder over them, and mean-pooling.

use super::layers::{EncoderBlock, LayerNorm};
use super::params::{Builder, ParamId, Session};
use super::ModelError;
use crate::datagen::{Attribute, MetadataCodebook, Rule};
use crate::tape::Tx;

pub struct CodebookEncoder {
    attr_embed: ParamId,
    rule_embed: ParamId,
    pos: ParamId,
    blocks: Vec<EncoderBlock>,
    out_ln: LayerNorm,
}

fn parse_descriptor(descriptor: &str) -> Option<(usize, usize)> {
    let (attr, rule) = descriptor.split_once(':')?;
    let attr_idx = Attribute::ALL.iter().position(|a| a.name() == attr)?;
    let rule_idx = Rule::ALL.iter().position(|r| r.name() == rule)?;
    Some((attr_idx, rule_idx))
}

impl CodebookEncoder {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize, ff: usize, depth: usize) -> Self {
        Self {
            attr_embed: b.normal(&format!("{name}.attr_embed"), &[Attribute::ALL.len(), dim], 0.5),
            rule_embed: b.normal(&format!("{name}.rule_embed"), &[Rule::ALL.len(), dim], 0.5),
            pos: b.sinusoidal(&format!("{name}.pos"), 2, dim),
            blocks: (0..depth)
                .map(|i| EncoderBlock::new(b, &format!("{name}.block{i}"), dim, heads, ff))
                .collect(),
            out_ln: LayerNorm::new(b, &format!("{name}.out_ln"), dim),
        }
    }

    /// Encodes every codebook entry: (K, d).
    pub fn encode(&self, s: &mut Session, codebook: &MetadataCodebook) -> Result<Tx, ModelError> {
        let mut attr_idx = Vec::with_capacity(codebook.len());
        let mut rule_idx = Vec::with_capacity(codebook.len());
        for entry in codebook.entries() {
            let (a, r) = parse_descriptor(entry)
                .ok_or_else(|| ModelError::UnknownDescriptor(entry.clone()))?;
            attr_idx.push(a);
            rule_idx.push(r);
        }
        let k = codebook.len();
        let attr_table = s.param(self.attr_embed);
        let rule_table = s.param(self.rule_embed);
        let d = s.tape.shape(attr_table)[1];
        let attrs = s.tape.gather(attr_table, 0, &attr_idx);
        let rules = s.tape.gather(rule_table, 0, &rule_idx);
        let attrs = s.tape.reshape(attrs, &[k, 1, d]);
        let rules = s.tape.reshape(rules, &[k, 1, d]);
        let mut x = s.tape.concat(&[attrs, rules], 1);
        let pos = s.param(self.pos);
        x = s.tape.add_broadcast(x, pos);
        for block in &self.blocks {
            x = block.forward(s, x);
        }
        let x = self.out_ln.forward(s, x);
        Ok(s.tape.mean_axis(x, 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamStore;
    use crate::rng::Stream;

    fn build() -> (CodebookEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = Stream::seed_from_u64(0);
        let enc = {
            let mut b = Builder::new(&mut store, &mut rng);
            CodebookEncoder::new(&mut b, "codebook", 32, 4, 64, 2)
        };
        (enc, store)
    }

    #[test]
    fn encodes_k_vectors_deterministically() {
        let (enc, store) = build();
        let cb = MetadataCodebook::from_entries(vec![
            "shade:constant".into(),
            "shape:prog_plus".into(),
            "size:distribute_three".into(),
        ]);
        let mut s = Session::inference(&store);
        let t1 = enc.encode(&mut s, &cb).unwrap();
        assert_eq!(s.tape.shape(t1), &[3, 32]);
        let t2 = enc.encode(&mut s, &cb).unwrap();
        let (a, b) = (s.tape.value(t1), s.tape.value(t2));
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn identical_descriptors_encode_identically() {
        let (enc, store) = build();
        // Same entry listed once vs. the codebook dedup path: encode two
        // codebooks whose first entries match.
        let cb1 = MetadataCodebook::from_entries(vec![
            "shade:constant".into(),
            "shape:prog_plus".into(),
        ]);
        let cb2 = MetadataCodebook::from_entries(vec!["shade:constant".into()]);
        let mut s = Session::inference(&store);
        let t1 = enc.encode(&mut s, &cb1).unwrap();
        let t2 = enc.encode(&mut s, &cb2).unwrap();
        let (a, b) = (s.tape.value(t1), s.tape.value(t2));
        for i in 0..32 {
            assert_eq!(a[[0, i]].to_bits(), b[[0, i]].to_bits());
        }
    }

    #[test]
    fn unknown_descriptor_is_an_error() {
        let (enc, store) = build();
        let cb = MetadataCodebook::from_entries(vec!["shade:wiggle".into()]);
        let mut s = Session::inference(&store);
        assert!(matches!(
            enc.encode(&mut s, &cb),
            Err(ModelError::UnknownDescriptor(_))
        ));
    }
}
