//! Face identification: feature extractors, the proxy classification head,
//! identification losses, and the closed-set evaluation protocol.

mod classifier;
mod dataset;
mod extractor;
mod features;
mod losses;
mod protocol;

pub use classifier::{train_linear_classifier, LinearClassifier, LinearClassifierConfig};
pub use dataset::{FaceDataset, FaceSample};
pub use extractor::{
    head_accuracy, train_extractor, ExtractorTrainConfig, FeatureExtractor, HeadLoss,
    OneHotExtractor, ProxyHead,
    RandomExtractor, TinyExtractor, TinyExtractorConfig,
};
pub use features::{cosine_similarity, nearest_neighbor_identify, FeatureVector};
pub use losses::{arcface_logits, ce_loss, ce_loss_tensor, ns_loss, ns_loss_tensor, NS_EPSILON};
pub use protocol::{
    closed_set_protocol, closed_set_protocol_with_gallery, extract_features, ClassifierKind,
    ProtocolConfig, ProtocolReport,
};
