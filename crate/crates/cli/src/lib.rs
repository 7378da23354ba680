//! Command-line front end: verb dispatch, flag/config resolution and run
//! manifests. Exit codes: 0 success, 1 usage error, 2 runtime error.

pub mod args;
pub mod runners;

use args::ArgError;

pub fn dispatch(argv: &[String]) -> i32 {
    match args::resolve(argv) {
        Err(ArgError::Usage(msg)) => {
            eprintln!("{msg}");
            1
        }
        Err(ArgError::Runtime(err)) => {
            eprintln!("error: {err}");
            2
        }
        Ok(resolved) => match runners::run(&resolved) {
            Ok(()) => 0,
            Err(ArgError::Usage(msg)) => {
                eprintln!("{msg}");
                1
            }
            Err(ArgError::Runtime(err)) => {
                eprintln!("error: {err}");
                2
            }
        },
    }
}
