pub mod corpus;
pub mod eval;
pub mod gloss;
pub mod model;
pub mod tokenizer;
pub mod schema;
pub mod store;
pub mod tensor;
pub mod trainer;
