use vkt_collect::{serve, Config};

#[tokio::main]
async fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match Config::from_env() {
        Ok(cfg) => serve(cfg).await,
        Err(e) => Err(e),
    };
    if let Err(e) = result {
        eprintln!(
            "{}",
            serde_json::json!({ "error": { "code": e.code, "message": e.message } })
        );
        std::process::exit(1);
    }
}
