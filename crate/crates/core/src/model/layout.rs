use alloc::vec::Vec;

use super::vocab::{ANS, EOS, IMG, PAD, QTN};
use crate::error::{Error, Result};

/// One position of the decoder sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Special(u32),
    MainImage(usize),
    RefImage(usize),
    Question(usize),
    Answer(u32),
    Pad,
}

/// `<img> Z_main <img> Z_ref <qtn> Z_qtn <ans> answer.. <eos> <pad>..`
/// together with the loss mask (answer tokens and `<eos>` only).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    slots: Vec<Slot>,
    loss_mask: Vec<bool>,
    answer_start: usize,
}

impl SequenceLayout {
    pub fn new(image_tokens: usize, question_len: usize, answer: &[u32], pad_to: Option<usize>) -> Result<Self> {
        if image_tokens == 0 || question_len == 0 {
            return Err(Error::invalid("layout", "image and question segments must be non-empty"));
        }
        let mut slots = Vec::new();
        slots.push(Slot::Special(IMG));
        slots.extend((0..image_tokens).map(Slot::MainImage));
        slots.push(Slot::Special(IMG));
        slots.extend((0..image_tokens).map(Slot::RefImage));
        slots.push(Slot::Special(QTN));
        slots.extend((0..question_len).map(Slot::Question));
        slots.push(Slot::Special(ANS));
        let answer_start = slots.len();
        slots.extend(answer.iter().map(|&t| Slot::Answer(t)));
        slots.push(Slot::Special(EOS));
        let mut loss_mask = alloc::vec![false; answer_start];
        loss_mask.resize(slots.len(), true);
        if let Some(n) = pad_to {
            if n < slots.len() {
                return Err(Error::invalid("layout", "sequence longer than pad length"));
            }
            slots.resize(n, Slot::Pad);
            loss_mask.resize(n, false);
        }
        Ok(Self {
            slots,
            loss_mask,
            answer_start,
        })
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn loss_mask(&self) -> &[bool] {
        &self.loss_mask
    }

    /// Index of the first answer token (one past `<ans>`).
    pub fn answer_start(&self) -> usize {
        self.answer_start
    }

    /// Index of the `<ans>` marker.
    pub fn ans_marker(&self) -> usize {
        self.answer_start - 1
    }

    /// Index of `<eos>`.
    pub fn eos_index(&self) -> usize {
        self.slots
            .iter()
            .position(|s| *s == Slot::Special(EOS))
            .expect("layout always holds <eos>")
    }

    pub fn answer(&self) -> Vec<u32> {
        self.slots
            .iter()
            .filter_map(|s| match s {
                Slot::Answer(t) => Some(*t),
                _ => None,
            })
            .collect()
    }

    /// Token id at each slot; embedding slots (image/question) report `None`.
    pub fn ids(&self) -> Vec<Option<u32>> {
        self.slots
            .iter()
            .map(|s| match *s {
                Slot::Special(t) | Slot::Answer(t) => Some(t),
                Slot::Pad => Some(PAD),
                _ => None,
            })
            .collect()
    }

    /// Prediction targets for rows `ans_marker..eos_index` of the decoder
    /// output: answer tokens then `<eos>`.
    pub fn targets(&self) -> Vec<u32> {
        let mut t = self.answer();
        t.push(EOS);
        t
    }
}
