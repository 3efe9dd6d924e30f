//! In-context regression with transformers.
//!
//! Constructed networks that featurize a prompt exactly and read out the least-squares style
//! prediction, trainable counterparts with hand-written gradients, synthetic tasks and the
//! experiment harness around them.
//!
//! ```
//! use icreg::constructions::build_poly_oracle;
//! use icreg::linalg::invert;
//! use icreg::regression::{reference_predict, sigma_closed_form, FeatureSpec, Uniform};
//! use icreg::transformer::{embed_prompt, network_forward};
//!
//! let spec = FeatureSpec::Monomial(2);
//! let sigma_inv = invert(&sigma_closed_form(&spec, &Uniform::symmetric()).unwrap()).unwrap();
//! let context = [(-0.5, 0.25), (0.1, 0.01), (0.7, 0.49)];
//! let net = build_poly_oracle(2, context.len(), &sigma_inv).unwrap();
//! let prompt = embed_prompt(&context, 0.3, net.d_embed).unwrap();
//! let got = network_forward(&net, &prompt).unwrap()[0];
//! let want = reference_predict(&context, 0.3, &spec, &sigma_inv).unwrap();
//! assert!((got - want).abs() < 1e-10);
//! ```

pub mod linalg;
pub mod transformer;
pub mod constructions;
pub mod regression;
pub mod tasks;
pub mod training;
pub mod experiments;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/prompts.md")]
    mod prompts {}
    #[doc = include_str!("../../../book/src/attention.md")]
    mod attention {}
    #[doc = include_str!("../../../book/src/constructions.md")]
    mod constructions {}
    #[doc = include_str!("../../../book/src/splines.md")]
    mod splines {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
