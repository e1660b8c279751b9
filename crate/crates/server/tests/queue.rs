use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use prefpaint_server::ids::Id;
use prefpaint_server::orchestrator::{Orchestrator, TaskFilter, Transition, TASKS_FILE};
use prefpaint_server::task::{Job, SampleJob, Task, TaskState};
use prefpaint_server::Error;
use proptest::prelude::*;

/// `count` doubles as the behaviour selector for the test handlers.
fn job(count: usize) -> Job {
    Job::SamplePairs(SampleJob {
        node_id: Id(1),
        count,
        prompts: vec![],
        seed: None,
    })
}

#[derive(Debug, Clone, Copy)]
enum Outcome {
    Ok,
    Err,
    Panic,
}

const WAIT: Duration = Duration::from_secs(20);

fn read_log(dir: &std::path::Path) -> Vec<Transition> {
    std::fs::read_to_string(dir.join(TASKS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Every task's logged states must walk pending -> processing -> terminal.
fn assert_legal_audit(log: &[Transition]) {
    let mut last: std::collections::HashMap<Id, TaskState> = Default::default();
    for tr in log {
        match last.get(&tr.task_id) {
            None => assert_eq!(tr.state, TaskState::Pending, "{tr:?}"),
            Some(prev) => assert!(prev.can_become(tr.state), "{prev:?} -> {:?}", tr.state),
        }
        last.insert(tr.task_id, tr.state);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn single_worker_is_fifo_and_runs_each_task_once(
        outcomes in prop::collection::vec(prop_oneof![6 => Just(Outcome::Ok), 2 => Just(Outcome::Err), 1 => Just(Outcome::Panic)], 1..16)
    ) {
        let dir = tempfile::tempdir().unwrap();
        let q = Orchestrator::open(dir.path()).unwrap();
        let tasks: Vec<Task> = outcomes.iter().enumerate().map(|(i, _)| q.enqueue(job(i + 1)).unwrap()).collect();
        let completed = Arc::new(Mutex::new(Vec::new()));
        let plan = outcomes.clone();
        let log = completed.clone();
        q.start(
            Arc::new(move |t: &Task| {
                log.lock().unwrap().push(t.task_id);
                let Job::SamplePairs(j) = &t.job else { unreachable!() };
                match plan[j.count - 1] {
                    Outcome::Ok => Ok(format!("r{}", t.task_id)),
                    Outcome::Err => Err(Error::validation("handler said no")),
                    Outcome::Panic => panic!("induced failure"),
                }
            }),
            1,
        );
        for t in &tasks {
            let done = q.wait(t.task_id, WAIT).unwrap();
            prop_assert!(done.state.is_terminal());
        }
        let order = completed.lock().unwrap().clone();
        prop_assert_eq!(order, tasks.iter().map(|t| t.task_id).collect::<Vec<_>>());
        for (t, o) in tasks.iter().zip(&outcomes) {
            let done = q.get(t.task_id).unwrap();
            prop_assert!(done.started_at.is_some() && done.ended_at.is_some());
            match o {
                Outcome::Ok => {
                    prop_assert_eq!(done.state, TaskState::Finished);
                    prop_assert_eq!(done.result_ref, Some(format!("r{}", t.task_id)));
                }
                Outcome::Err | Outcome::Panic => {
                    prop_assert_eq!(done.state, TaskState::Failed);
                    prop_assert!(!done.error.unwrap_or_default().is_empty());
                }
            }
        }
        q.shutdown();
        let log = read_log(dir.path());
        assert_legal_audit(&log);
        prop_assert_eq!(log.len(), 3 * tasks.len());
    }
}

#[test]
fn panicking_task_fails_alone_and_queue_moves_on() {
    let dir = tempfile::tempdir().unwrap();
    let q = Orchestrator::open(dir.path()).unwrap();
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    q.start(
        Arc::new(move |t: &Task| {
            c.fetch_add(1, Ordering::SeqCst);
            if t.task_id == Id(2) {
                panic!("boom");
            }
            Ok("done".into())
        }),
        1,
    );
    let ids: Vec<Id> = (1..=4).map(|i| q.enqueue(job(i)).unwrap().task_id).collect();
    let states: Vec<Task> = ids.iter().map(|&id| q.wait(id, WAIT).unwrap()).collect();
    let failed: Vec<&Task> = states.iter().filter(|t| t.state == TaskState::Failed).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].task_id, Id(2));
    assert!(failed[0].error.as_deref().unwrap().contains("boom"));
    assert!(states.iter().filter(|t| t.task_id != Id(2)).all(|t| t.state == TaskState::Finished));
    assert_eq!(calls.load(Ordering::SeqCst), 4);
}

#[test]
fn processing_filter_shows_exactly_the_running_task() {
    let dir = tempfile::tempdir().unwrap();
    let q = Orchestrator::open(dir.path()).unwrap();
    let (started_tx, started_rx) = mpsc::channel::<Id>();
    let (release_tx, release_rx) = mpsc::channel::<()>();
    let started_tx = Mutex::new(started_tx);
    let release_rx = Mutex::new(release_rx);
    q.start(
        Arc::new(move |t: &Task| {
            started_tx.lock().unwrap().send(t.task_id).unwrap();
            release_rx.lock().unwrap().recv().unwrap();
            Ok(String::new())
        }),
        1,
    );
    let first = q.enqueue(job(1)).unwrap();
    let second = q.enqueue(job(2)).unwrap();
    assert_eq!(started_rx.recv_timeout(WAIT).unwrap(), first.task_id);

    let running = q.list(&TaskFilter {
        state: Some(TaskState::Processing),
        ..Default::default()
    });
    assert_eq!(running.iter().map(|t| t.task_id).collect::<Vec<_>>(), vec![first.task_id]);
    assert_eq!(q.get(second.task_id).unwrap().state, TaskState::Pending);

    release_tx.send(()).unwrap();
    assert_eq!(started_rx.recv_timeout(WAIT).unwrap(), second.task_id);
    release_tx.send(()).unwrap();
    assert_eq!(q.wait(second.task_id, WAIT).unwrap().state, TaskState::Finished);
    assert_eq!(q.get(first.task_id).unwrap().state, TaskState::Finished);
}

#[test]
fn pending_tasks_wait_across_a_clean_restart() {
    let dir = tempfile::tempdir().unwrap();
    {
        let q = Orchestrator::open(dir.path()).unwrap();
        q.enqueue(job(1)).unwrap();
        q.enqueue(job(2)).unwrap();
    }
    let q = Orchestrator::open(dir.path()).unwrap();
    let ran = Arc::new(Mutex::new(Vec::new()));
    let r = ran.clone();
    q.start(
        Arc::new(move |t: &Task| {
            r.lock().unwrap().push(t.task_id);
            Ok(String::new())
        }),
        1,
    );
    let third = q.enqueue(job(3)).unwrap();
    assert_eq!(third.task_id, Id(3));
    q.wait(third.task_id, WAIT).unwrap();
    assert_eq!(*ran.lock().unwrap(), vec![Id(1), Id(2), Id(3)]);
}

#[test]
fn several_workers_still_run_everything_once() {
    let dir = tempfile::tempdir().unwrap();
    let q = Orchestrator::open(dir.path()).unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let s = seen.clone();
    q.start(
        Arc::new(move |t: &Task| {
            s.lock().unwrap().push(t.task_id);
            Ok(String::new())
        }),
        3,
    );
    let ids: Vec<Id> = (1..=30).map(|i| q.enqueue(job(i % 60 + 1)).unwrap().task_id).collect();
    for &id in &ids {
        assert!(q.wait(id, WAIT).unwrap().state.is_terminal());
    }
    let mut seen = seen.lock().unwrap().clone();
    seen.sort();
    assert_eq!(seen, ids);
}
