use prefcore_web::Demo;

#[test]
fn recommend_respond_and_fairness() {
    let mut demo = Demo::build("heterogeneous-preferences", 3).unwrap();
    let user = demo.users()[0];
    let ranked = demo.try_recommend(user, "").unwrap();
    assert!(ranked.starts_with("decision 0 for user"));
    assert!(ranked.contains(" 1. "));
    assert!(ranked.contains("rerank: mixture"));

    let before = demo.try_respond(0.75, None).unwrap();
    assert!(before.contains("feedback recorded"));
    assert!(demo.try_respond(0.75, None).is_err());

    demo.try_recommend(user, "").unwrap();
    let pair = demo.try_respond(1.0, Some(3)).unwrap();
    assert!(pair.contains("prefers"), "{pair}");

    let on = demo.try_set_fairness(0.1).unwrap();
    assert!(on.starts_with("fairness on"));
    let ranked = demo.try_recommend(user, "").unwrap();
    assert!(ranked.contains("fairness"));
    assert!(demo
        .try_set_fairness(-1.0)
        .unwrap()
        .starts_with("fairness off"));
}

#[test]
fn contextual_preset_lists_its_tags() {
    let demo = Demo::build("contextual-actions", 1).unwrap();
    assert!(demo.tags().iter().any(|t| t == "morning"));
    assert!(Demo::build("mnar-exposure", 1).is_err());
    assert!(Demo::build("nope", 1).is_err());
}

#[test]
fn comma_separated_context_admits_candidates() {
    let mut demo = Demo::build("contextual-actions", 3).unwrap();
    let ranked = demo.try_recommend(1, "at-home, morning").unwrap();
    assert!(ranked.contains(" 1. "), "{ranked}");
    assert!(demo.try_respond(0.5, Some(99)).is_err());
    assert!(demo.try_respond(0.5, Some(2)).is_ok());

    let none = demo.try_recommend(1, "").unwrap();
    assert!(none.contains("nothing to rate"), "{none}");
    assert!(demo.try_respond(0.5, None).is_err());
}
