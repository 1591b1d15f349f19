//! Unsupervised embeddings, k-means pseudo-labels and the cluster-as-task distribution.

mod autoencoder;
mod kmeans;
mod tasks;

pub use autoencoder::{embed, train_autoencoder, AutoencoderConfig, Encoder, EmbeddingSet, TrainedAutoencoder};
pub use kmeans::{kmeans, KMeansResult};
pub(crate) use tasks::Reader;
pub use tasks::{
    build_task_distribution, Batch, BalanceMode, Cluster, DistributionConfig, Member, MemberTransform,
    TaskDistribution, TaskEpisode,
};
