//! Parameterized building blocks shared by the encoder and decoder.

mod nn;
mod params;

pub use nn::{Blstm, BlstmStack, ConvLayer, Embedding, Linear, Lstm, LstmState, VggBlock};
pub use params::{ParamId, ParamStore, CHECKPOINT_VERSION, INIT_RANGE, LSTM_GATE_ORDER};
