//! The `photocue` command line: argument parsing, verb dispatch and the
//! HTTP retrieval endpoint.
//!
//! ```text
//! photocue <verb> [--flag value ...] [--config run.cfg]
//! ```
//!
//! Flag values override values from `--config`, which override built-in
//! defaults. `LLM_BASE_URL`, `LLM_API_KEY` and `EMBED_BASE_URL` are read from
//! the environment. Exit codes: 0 ok, 2 usage, 3 data, 4 upstream service.

pub mod app;
pub mod args;
pub mod error;
pub mod serve;

pub use app::run;
pub use args::{parse_command, Command, Verb};
pub use error::CliError;

/// Parses and runs `argv` (without the program name); returns the exit code.
pub fn main_with(argv: Vec<String>) -> i32 {
    let result = parse_command(argv).and_then(|cmd| {
        let mut stdin = std::io::stdin().lock();
        let mut stdout = std::io::stdout().lock();
        run(&cmd, &mut stdin, &mut stdout)
    });
    match result {
        Ok(()) => 0,
        Err(CliError::Help(text)) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code()
        }
    }
}
