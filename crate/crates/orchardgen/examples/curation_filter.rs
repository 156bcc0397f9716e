//! Automatic dataset curation: embed images with PCA then t-SNE, cluster
//! with k-means, and keep only the largest cluster.
//!
//! Plants six blank "failed generation" images among twenty real orchard
//! scenes and shows the filter recovering exactly the scenes. Also prints
//! the t-SNE KL divergence before and after optimization and the cluster
//! census from the report.
//!
//! Run with: cargo run --example curation_filter

use orchardgen::config::RunConfig;
use orchardgen::curate::{filter_largest_cluster, FilterConfig};
use orchardgen::rng;
use orchardgen::scene::{gen_scene, ColorClass};
use orchardgen::{ImageTensor, Result};

fn main() -> Result<()> {
    let config = RunConfig::default();
    let mut rng = rng::from_seed(606);

    let mut images = Vec::new();
    for i in 0..20 {
        let color = if i % 2 == 0 { ColorClass::Red } else { ColorClass::Green };
        let (image, _) = gen_scene(&config.scene_spec(color), &mut rng)?;
        images.push(image);
    }
    // Six near-identical blanks: a tight island far from every scene.
    for k in 0..6 {
        let mut blank = ImageTensor::zeros(3, config.image_size, config.image_size);
        let level = 1.0 - 0.02 * k as f64;
        for v in blank.data_mut() {
            *v = level;
        }
        images.push(blank);
    }
    println!("embedded set: 20 scenes + 6 blanks");

    let filter = FilterConfig {
        kmeans_k: 2,
        ..FilterConfig::default()
    };
    let report = filter_largest_cluster(&images, &filter, &mut rng)?;

    println!("\ncluster sizes: {:?}", report.cluster_sizes);
    println!(
        "t-SNE KL divergence: {:.4} initial -> {:.4} final",
        report.initial_kl, report.final_kl
    );
    println!(
        "PCA kept {} dims; perplexity used: {}",
        report.pca_dims_used, report.perplexity_used
    );

    let kept_blanks: Vec<usize> = report.kept.iter().copied().filter(|&i| i >= 20).collect();
    println!("\nkept {} images: indices {:?}", report.kept.len(), report.kept);
    if report.kept.len() == 20 && kept_blanks.is_empty() {
        println!("-> all 20 scenes kept, all 6 blanks rejected");
    } else {
        println!("-> unexpected split; blanks kept: {kept_blanks:?}");
    }
    Ok(())
}
