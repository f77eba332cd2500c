//! Named parameter groups that can be held either as stored tensors or as
//! handles bound onto a [`Tape`].

use crate::tensor::{Tape, Tensor, Var};

/// Declares a parameter group generic over its slot type, with name-aware
/// traversal and tape binding.
macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident { $($(#[$fmeta:meta])* $field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = $crate::tensor::Tensor> {
            $($(#[$fmeta])* pub $field: T,)+
        }

        impl<T> $name<T> {
            pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &self.$field);)+
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &mut self.$field);)+
            }

            pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> $name<U> {
                $name { $($field: f(&self.$field),)+ }
            }

            /// Every slot in declaration order.
            pub fn slots(&self) -> Vec<&T> {
                vec![$(&self.$field),+]
            }

            pub fn slots_mut(&mut self) -> Vec<&mut T> {
                vec![$(&mut self.$field),+]
            }
        }

        impl $name<$crate::tensor::Tensor> {
            pub fn bind(&self, tape: &mut $crate::tensor::Tape) -> $name<$crate::tensor::Var> {
                self.map(&mut |t| tape.leaf(t.clone()))
            }

            pub fn bind_constant(&self, tape: &mut $crate::tensor::Tape) -> $name<$crate::tensor::Var> {
                self.map(&mut |t| tape.constant(t.clone()))
            }
        }
    };
}

pub(crate) use param_group;

/// Binds a single stored tensor, optionally as a constant.
pub(crate) fn bind_one(tape: &mut Tape, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        tape.leaf(t.clone())
    } else {
        tape.constant(t.clone())
    }
}
