use std::sync::Arc;
use std::time::Duration;

use deepbass::datasets::HiddenTruth;
use deepbass::oracle::{
    AnswerSource, ManualClock, Oracle, OracleQueue, OracleRequest, Payload, QueueConfig, RemoteOracle,
    RequestState, SimulatedOracle, SubmitError,
};
use deepbass::Error;

fn request(request_id: u64, sample_id: usize) -> OracleRequest {
    OracleRequest {
        request_id,
        sample_id,
        payload: Payload::Point { x: 0.5, y: -0.25 },
        entropy: 0.9,
        suggestion: 1,
        iteration: 2,
    }
}

fn queue(timeout: Option<u64>, journal: Option<std::path::PathBuf>) -> (OracleQueue, ManualClock) {
    let clock = ManualClock::new(1_000);
    let q = OracleQueue::with_clock(
        QueueConfig {
            run_id: "run".into(),
            classes: 10,
            timeout: timeout.map(Duration::from_secs),
            journal,
        },
        Arc::new(clock.clone()),
    )
    .unwrap();
    (q, clock)
}

#[test]
fn simulated_answers_are_the_hidden_labels() {
    let truth = HiddenTruth::new([(10, 7), (11, 2)].into_iter().collect());
    let mut o = SimulatedOracle::new(truth);
    o.ask(vec![request(1, 10), request(2, 11)]).unwrap();
    let got = o.collect().unwrap();
    assert_eq!(got.answers.iter().map(|a| a.label).collect::<Vec<_>>(), vec![7, 2]);
    assert!(got.answers.iter().all(|a| a.source == AnswerSource::Simulated));
    assert!(o.collect().unwrap().answers.is_empty());
    assert!(matches!(o.ask(vec![request(1, 11)]), Err(Error::Oracle(_))));
    assert!(matches!(o.ask(vec![request(3, 99)]), Err(Error::Lookup(_))));
}

#[test]
fn an_answer_is_polled_once() {
    let (q, _) = queue(None, None);
    assert!(q.poll_answers().unwrap().is_empty());
    let t = q.enqueue(request(1, 5)).unwrap();
    assert_eq!(t.request_id, 1);
    assert_eq!(q.pending().unwrap().len(), 1);
    let a = q.submit_answer(1, 3, AnswerSource::Human).unwrap();
    assert_eq!((a.sample_id, a.label), (5, 3));
    assert!(q.pending().unwrap().is_empty());
    let polled = q.poll_answers().unwrap();
    assert_eq!(polled.len(), 1);
    assert_eq!(polled[0].label, 3);
    assert!(q.poll_answers().unwrap().is_empty());
}

#[test]
fn submissions_are_validated() {
    let (q, _) = queue(None, None);
    q.enqueue(request(1, 5)).unwrap();
    assert_eq!(q.submit_answer(9, 1, AnswerSource::Human), Err(SubmitError::UnknownRequest(9)));
    assert_eq!(
        q.submit_answer(1, 10, AnswerSource::Human),
        Err(SubmitError::InvalidLabel { label: 10, classes: 10 })
    );
    q.submit_answer(1, 4, AnswerSource::Human).unwrap();
    assert_eq!(q.submit_answer(1, 4, AnswerSource::Human), Err(SubmitError::AlreadyAnswered(1)));
    assert!(matches!(q.enqueue(request(1, 6)), Err(Error::Oracle(_))));
}

#[test]
fn requests_expire_after_the_timeout() {
    let (q, clock) = queue(Some(30), None);
    let t = q.enqueue(request(1, 5)).unwrap();
    assert_eq!(t.expires_at, Some(31_000));
    clock.advance(Duration::from_secs(29));
    assert_eq!(q.pending().unwrap().len(), 1);
    assert!(q.take_expired().is_empty());
    clock.advance(Duration::from_secs(1));
    assert!(q.pending().unwrap().is_empty());
    assert_eq!(q.requests(Some(RequestState::Expired)).unwrap().len(), 1);
    assert_eq!(q.submit_answer(1, 2, AnswerSource::Human), Err(SubmitError::Expired(1)));
    assert_eq!(q.take_expired(), vec![1]);
    assert!(q.take_expired().is_empty());
}

#[test]
fn concurrent_submissions_accept_exactly_one() {
    let (q, _) = queue(None, None);
    q.enqueue(request(1, 5)).unwrap();
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let q = q.clone();
            std::thread::spawn(move || q.submit_answer(1, i, AnswerSource::Human).is_ok())
        })
        .collect();
    let accepted = handles.into_iter().map(|h| h.join().unwrap()).filter(|&ok| ok).count();
    assert_eq!(accepted, 1);
    assert_eq!(q.poll_answers().unwrap().len(), 1);
}

#[test]
fn the_journal_survives_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("journal.jsonl");
    {
        let (q, _) = queue(Some(60), Some(path.clone()));
        q.enqueue(request(1, 5)).unwrap();
        q.enqueue(request(2, 6)).unwrap();
        q.enqueue(request(3, 7)).unwrap();
        q.submit_answer(1, 8, AnswerSource::Human).unwrap();
        q.submit_answer(2, 9, AnswerSource::Human).unwrap();
        assert_eq!(q.poll_answers().unwrap().len(), 2);
        q.enqueue(request(4, 8)).unwrap();
        q.submit_answer(4, 1, AnswerSource::Human).unwrap();
    }
    let (q, _) = queue(Some(60), Some(path.clone()));
    let pending = q.pending().unwrap();
    assert_eq!(pending.iter().map(|v| v.request.request_id).collect::<Vec<_>>(), vec![3]);
    assert_eq!(pending[0].request, request(3, 7));
    assert_eq!(q.submit_answer(1, 0, AnswerSource::Human), Err(SubmitError::AlreadyAnswered(1)));
    let redelivered = q.poll_answers().unwrap();
    assert_eq!(redelivered.len(), 1);
    assert_eq!((redelivered[0].request_id, redelivered[0].label), (4, 1));
    assert_eq!(q.next_request_id(), 5);
    drop(q);

    // a torn final line is an unacknowledged write and is skipped
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"event\":\"answer\",\"answ");
    std::fs::write(&path, text).unwrap();
    let (q, _) = queue(Some(60), Some(path.clone()));
    assert!(q.poll_answers().unwrap().is_empty());
    assert_eq!(q.pending().unwrap().len(), 1);
    q.enqueue(request(5, 9)).unwrap();
    drop(q);
    let (q, _) = queue(Some(60), Some(path));
    assert_eq!(q.pending().unwrap().len(), 2);
}

#[test]
fn a_corrupt_journal_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("journal.jsonl");
    std::fs::write(&path, "not json\n{\"event\":\"delivered\",\"request_id\":1}\n").unwrap();
    let err = OracleQueue::open(QueueConfig {
        run_id: "r".into(),
        classes: 2,
        timeout: None,
        journal: Some(path),
    })
    .unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
}

#[test]
fn the_remote_oracle_reports_answers_and_expiries() {
    let (q, clock) = queue(Some(10), None);
    let mut o = RemoteOracle::new(q.clone());
    assert_eq!(o.next_request_id(), 1);
    o.ask(vec![request(1, 5), request(2, 6)]).unwrap();
    assert_eq!(o.next_request_id(), 3);
    q.submit_answer(2, 4, AnswerSource::Human).unwrap();
    let got = o.collect().unwrap();
    assert_eq!(got.answers.len(), 1);
    assert_eq!(got.answers[0].source, AnswerSource::Human);
    assert!(got.expired.is_empty());
    clock.advance(Duration::from_secs(10));
    let got = o.collect().unwrap();
    assert!(got.answers.is_empty());
    assert_eq!(got.expired, vec![1]);
}

#[test]
fn status_counts_pending_requests() {
    let (q, _) = queue(None, None);
    q.enqueue(request(1, 5)).unwrap();
    q.enqueue(request(2, 6)).unwrap();
    q.update_status(|s| s.iteration = 4);
    let s = q.status();
    assert_eq!((s.iteration, s.pending, s.run_id.as_str()), (4, 2, "run"));
}
