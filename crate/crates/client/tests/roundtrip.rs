use std::net::SocketAddr;

use cirrus_client::{Client, ClientError};
use cirrus_core::api::PlanRequest;
use cirrus_core::harness::{run_scenario, Scenario};
use cirrus_core::manifest::THREE_TIER_DESCRIPTOR;

async fn client() -> Client {
    let (addr, _) = cirrus_server::spawn(SocketAddr::from(([127, 0, 0, 1], 0)))
        .await
        .unwrap();
    Client::new(&format!("http://{addr}")).unwrap()
}

#[tokio::test]
async fn endpoints_round_trip() {
    let c = client().await;
    assert_eq!(c.health().await.unwrap()["status"], "ok");
    let names = c.scenarios().await.unwrap();
    assert!(names.iter().any(|n| n == "flash-crowd"));
    let scenario = c.scenario("overhead-baseline").await.unwrap();
    assert_eq!(scenario, Scenario::builtin("overhead-baseline").unwrap());

    let bundle = c.run(&scenario, 11).await.unwrap();
    let direct = run_scenario(&scenario, 11).unwrap();
    assert_eq!(bundle.events_ndjson, direct.log.to_ndjson());

    let same = c.overhead(&bundle.report, &bundle.report).await.unwrap();
    assert_eq!(same.overhead, 0.0);

    let a = c.availability(8760.0, 0.06).await.unwrap();
    assert!((a.availability - 8760.0 / 8760.06).abs() < 1e-15);

    let r = c
        .recovery(&Scenario::builtin("kill-leader").unwrap(), 7)
        .await
        .unwrap();
    assert_eq!(r.summary.completed, 1);

    let p = c
        .plan(&PlanRequest {
            descriptor: THREE_TIER_DESCRIPTOR.into(),
            seed: 0,
            providers: None,
        })
        .await
        .unwrap();
    assert_eq!(p.plan.providers_of("storage").len(), 2);
}

#[tokio::test]
async fn server_errors_surface_as_api_errors() {
    let c = client().await;
    match c.scenario("missing").await {
        Err(ClientError::Api {
            status: 404,
            message,
        }) => assert!(message.contains("missing")),
        other => panic!("unexpected {other:?}"),
    }
    assert!(matches!(
        c.availability(-1.0, 1.0).await,
        Err(ClientError::Api { status: 422, .. })
    ));
}

#[tokio::test]
async fn unreachable_server_is_a_transport_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let c = Client::new(&format!("http://{addr}")).unwrap();
    assert!(matches!(c.health().await, Err(ClientError::Transport(_))));
}
