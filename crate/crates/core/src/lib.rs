pub mod baseprep;
pub mod checkpoint;
pub mod corpus;
pub mod curriculum;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod tokenizer;
