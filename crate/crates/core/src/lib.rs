pub mod attribution;
pub mod corpus;
pub mod harness;
pub mod llmclient;
pub mod prompting;
pub mod proxy;
pub mod selection;
