//! Procedural landmark-annotated faces, self-blended forgeries, and the
//! `LKDS` dataset container.

pub mod lkds;
mod synth;
pub mod template;

pub use lkds::{read_dataset, write_dataset};
pub use synth::{
    apply_forgery, composite, convex_hull, forge_face, generate_dataset, generate_face, hull_mask, transform_image,
    FaceParams, ForgeParams, Forgery, Label, Sample, Similarity,
};

#[cfg(test)]
mod tests;
