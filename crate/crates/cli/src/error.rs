use pathnet::container::ContainerError;
use pathnet::data::DataError;
use pathnet::net::NetError;
use pathnet::prune::PruneError;
use pathnet::qmc::QmcError;
use pathnet::topology::TopologyError;
use thiserror::Error;

/// A failed command, classified by exit code.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum Failure {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Io(_) => 1,
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<QmcError> for Failure {
    fn from(e: QmcError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<TopologyError> for Failure {
    fn from(e: TopologyError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<NetError> for Failure {
    fn from(e: NetError) -> Self {
        match e {
            NetError::NonFinite => Failure::Numeric(e.to_string()),
            NetError::InputSize { .. } | NetError::TargetSize { .. } | NetError::Label { .. } | NetError::EmptyDataset => {
                Failure::Data(e.to_string())
            }
            _ => Failure::Config(e.to_string()),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ContainerError> for Failure {
    fn from(e: ContainerError) -> Self {
        match e {
            ContainerError::Io { .. } => Failure::Io(e.to_string()),
            ContainerError::Topology(t) => t.into(),
            ContainerError::Net(n) => n.into(),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<PruneError> for Failure {
    fn from(e: PruneError) -> Self {
        match e {
            PruneError::NotNormalized(_) => Failure::Numeric(e.to_string()),
            PruneError::Topology(t) => t.into(),
            PruneError::Net(n) => n.into(),
            _ => Failure::Config(e.to_string()),
        }
    }
}
