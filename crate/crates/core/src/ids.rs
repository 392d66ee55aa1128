use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! id_type {
    ($(#[$m:meta])* $name:ident($inner:ty)) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_type!(
    /// Object category (the unit the satisfaction discriminator talks about).
    CategoryId(u32)
);
id_type!(DemandId(u32));
id_type!(
    /// Object instance within one scene.
    InstanceId(u32)
);
id_type!(SceneId(u64));
id_type!(PrototypeId(u32));
